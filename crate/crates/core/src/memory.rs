//! History rasterized map memory: per-track instance masks with
//! confidence-weighted decay updates, ego-motion warping, and pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::PipelineError;
use crate::geometry::{GridWindow, RasterMask, Se2Pose};
use crate::world::MapClass;

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub mask: RasterMask,
    pub class: MapClass,
    pub last_update_frame: usize,
}

/// Track-id-keyed per-instance masks sharing one grid geometry.
#[derive(Debug, Clone)]
pub struct HistoryMapMemory {
    window: GridWindow,
    resolution: f64,
    entries: BTreeMap<u64, MemoryEntry>,
}

impl HistoryMapMemory {
    pub fn new(window: GridWindow, resolution: f64) -> Self {
        Self {
            window,
            resolution,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, track_id: u64) -> Option<&MemoryEntry> {
        self.entries.get(&track_id)
    }

    pub fn track_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    fn check_mask(&self, mask: &RasterMask) -> Result<(), PipelineError> {
        let ok = mask.window == self.window && mask.resolution == self.resolution;
        if !ok {
            return Err(PipelineError::Contract(
                "mask grid does not match the memory grid".into(),
            ));
        }
        Ok(())
    }

    /// Start a new entry as mask * score.
    pub fn init_entry(
        &mut self,
        track_id: u64,
        pred_mask: &RasterMask,
        score: f64,
        class: MapClass,
        frame: usize,
    ) -> Result<(), PipelineError> {
        if self.entries.contains_key(&track_id) {
            return Err(PipelineError::Contract(format!(
                "init_entry: track {track_id} already present"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(PipelineError::Contract(format!(
                "init_entry: score {score} outside [0,1]"
            )));
        }
        self.check_mask(pred_mask)?;
        let mut mask = pred_mask.clone();
        for v in &mut mask.grid {
            *v *= score;
        }
        self.entries.insert(
            track_id,
            MemoryEntry {
                mask,
                class,
                last_update_frame: frame,
            },
        );
        Ok(())
    }

    /// Decay update: m <- (1-beta) * m + beta * pred * score. Convex, so
    /// values stay in [0,1].
    pub fn update_entry(
        &mut self,
        track_id: u64,
        pred_mask: &RasterMask,
        score: f64,
        beta: f64,
        frame: usize,
    ) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&beta) || !(0.0..=1.0).contains(&score) {
            return Err(PipelineError::Contract(format!(
                "update_entry: beta {beta} / score {score} outside [0,1]"
            )));
        }
        self.check_mask(pred_mask)?;
        let entry = self.entries.get_mut(&track_id).ok_or_else(|| {
            PipelineError::Contract(format!("update_entry: unknown track {track_id}"))
        })?;
        for (m, p) in entry.mask.grid.iter_mut().zip(&pred_mask.grid) {
            *m = (1.0 - beta) * *m + beta * p * score;
        }
        entry.last_update_frame = frame;
        Ok(())
    }

    /// Resample every mask onto the next ego frame: each destination cell
    /// center is mapped through `ego_motion` into the previous frame and
    /// sampled bilinearly, with zero fill outside the window.
    pub fn warp(&mut self, ego_motion: &Se2Pose) -> Result<(), PipelineError> {
        if !ego_motion.is_finite() {
            return Err(PipelineError::Contract("non-finite ego motion".into()));
        }
        for entry in self.entries.values_mut() {
            entry.mask = warp_mask(&entry.mask, ego_motion);
        }
        Ok(())
    }

    /// Drop every entry whose id is not live. Returns how many were removed.
    pub fn prune(&mut self, live_track_ids: &BTreeSet<u64>) -> usize {
        let before = self.entries.len();
        self.entries.retain(|id, _| live_track_ids.contains(id));
        before - self.entries.len()
    }

    /// Debug dump: one portable graymap per track plus an index file.
    pub fn dump_to_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (id, entry) in &self.entries {
            let file = format!("track_{id}.pgm");
            let mut pgm = String::new();
            pgm.push_str("P2\n");
            pgm.push_str(&format!("{} {}\n255\n", entry.mask.w, entry.mask.h));
            // Top image row = highest y, matching the usual image convention.
            for row in (0..entry.mask.h).rev() {
                let line: Vec<String> = (0..entry.mask.w)
                    .map(|col| {
                        format!("{}", (entry.mask.get(row, col).clamp(0.0, 1.0) * 255.0) as u8)
                    })
                    .collect();
                pgm.push_str(&line.join(" "));
                pgm.push('\n');
            }
            std::fs::write(dir.join(&file), pgm)?;
            index.push_str(&format!(
                "{id} {} {} {}\n",
                entry.class.name(),
                entry.last_update_frame,
                file
            ));
        }
        let mut f = std::fs::File::create(dir.join("index.txt"))?;
        f.write_all(index.as_bytes())
    }
}

/// Pull-back warp of one mask. The pose maps destination-frame coordinates
/// to source-frame coordinates.
pub fn warp_mask(mask: &RasterMask, pose: &Se2Pose) -> RasterMask {
    let mut out = mask.clone();
    for row in 0..mask.h {
        for col in 0..mask.w {
            let dest = mask.cell_center(row, col);
            let src = pose.apply_point(dest);
            out.set(row, col, bilinear_sample(mask, src));
        }
    }
    out
}

/// Bilinear sample at metric coordinates; cells outside the window read 0.
fn bilinear_sample(mask: &RasterMask, p: (f64, f64)) -> f64 {
    let fx = (p.0 - mask.window.x_min) / mask.resolution - 0.5;
    let fy = (p.1 - mask.window.y_min) / mask.resolution - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = fx - x0;
    let ay = fy - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - ay), (1, ay)] {
        for (dx, wx) in [(0i64, 1.0 - ax), (1, ax)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let col = x0 as i64 + dx;
            let row = y0 as i64 + dy;
            if row >= 0 && (row as usize) < mask.h && col >= 0 && (col as usize) < mask.w {
                acc += wgt * mask.get(row as usize, col as usize);
            }
        }
    }
    acc
}
