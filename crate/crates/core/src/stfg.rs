//! Short-term future guidance: per-track polyline histories, next-frame
//! offset prediction, and fusion of the predicted polyline back into the
//! track query.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::PipelineError;
use crate::error::TensorError;
use crate::geometry::{Point, Se2Pose};
use crate::tensor::{Activation, Init, ParameterStore, Tape, Var};

/// Ring buffers of the most recent decoded polylines per track, all
/// expressed in the current ego frame.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    capacity: usize,
    n_points: usize,
    entries: BTreeMap<u64, VecDeque<(usize, Vec<Point>)>>,
}

impl TrajectoryStore {
    pub fn new(capacity: usize, n_points: usize) -> Self {
        assert!(capacity >= 1, "history capacity must be >= 1");
        Self {
            capacity,
            n_points,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn track_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, track_id: u64) -> Option<&VecDeque<(usize, Vec<Point>)>> {
        self.entries.get(&track_id)
    }

    /// Append this frame's decoded polyline for a track. Frames must arrive
    /// contiguously for a live track.
    pub fn push(
        &mut self,
        track_id: u64,
        frame: usize,
        points: Vec<Point>,
    ) -> Result<(), PipelineError> {
        if points.len() != self.n_points {
            return Err(PipelineError::Contract(format!(
                "trajectory push expects {} points, got {}",
                self.n_points,
                points.len()
            )));
        }
        let buf = self.entries.entry(track_id).or_default();
        if let Some((last, _)) = buf.back() {
            if frame != last + 1 {
                return Err(PipelineError::Contract(format!(
                    "non-contiguous history for track {track_id}: {last} -> {frame}"
                )));
            }
        }
        buf.push_back((frame, points));
        while buf.len() > self.capacity {
            buf.pop_front();
        }
        Ok(())
    }

    /// Re-express every stored polyline in the new ego frame after the ego
    /// moved by `ego_motion`.
    pub fn advance_frame(&mut self, ego_motion: &Se2Pose) {
        let inv = ego_motion.inverse();
        for buf in self.entries.values_mut() {
            for (_, points) in buf.iter_mut() {
                for p in points.iter_mut() {
                    *p = inv.apply_point(*p);
                }
            }
        }
    }

    pub fn retain_live(&mut self, live: &BTreeSet<u64>) {
        self.entries.retain(|id, _| live.contains(id));
    }

    pub fn remove(&mut self, track_id: u64) {
        self.entries.remove(&track_id);
    }
}

/// Parameter namespace for the future-offset head and the fusion layer.
///
/// The final MLP layer starts at zero so an untrained head predicts zero
/// offsets; the fusion weight starts as [I | 0] so fused queries pass
/// through unchanged until training moves them.
#[derive(Debug, Clone)]
pub struct StfgNet {
    pub c: usize,
    pub n_history: usize,
    pub n_points: usize,
    pub hidden: usize,
    pub x_half: f64,
    pub y_half: f64,
}

impl StfgNet {
    pub fn register(
        store: &mut ParameterStore,
        c: usize,
        n_history: usize,
        n_points: usize,
        x_half: f64,
        y_half: f64,
    ) -> Self {
        let hidden = 128;
        let in_dim = n_history * n_points * 2;
        store.ensure(
            "stfg.mlp.w0",
            &[in_dim, hidden],
            Init::UniformFanIn { fan_in: in_dim },
        );
        store.ensure("stfg.mlp.b0", &[hidden], Init::Zeros);
        store.ensure(
            "stfg.mlp.w1",
            &[hidden, hidden],
            Init::UniformFanIn { fan_in: hidden },
        );
        store.ensure("stfg.mlp.b1", &[hidden], Init::Zeros);
        store.ensure("stfg.mlp.w2", &[hidden, n_points * 2], Init::Zeros);
        store.ensure("stfg.mlp.b2", &[n_points * 2], Init::Zeros);
        store.ensure("stfg.phi.w", &[c, c], Init::UniformFanIn { fan_in: c });
        store.ensure("stfg.phi.b", &[c], Init::Zeros);
        store.ensure("stfg.fuse.w", &[2 * c, c], Init::BlockIdentity);
        store.ensure("stfg.fuse.b", &[c], Init::Zeros);
        Self {
            c,
            n_history,
            n_points,
            hidden,
            x_half,
            y_half,
        }
    }

    /// Predict per-point offsets and the next-frame polyline from a track's
    /// history buffer. Histories shorter than the capacity are left-padded
    /// by repeating the oldest frame. Returns (offsets, predicted polyline),
    /// both [n_points, 2] in meters.
    pub fn predict_future(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        history: &VecDeque<(usize, Vec<Point>)>,
    ) -> Result<(Var, Var), PipelineError> {
        if history.is_empty() {
            return Err(PipelineError::Contract(
                "predict_future on an empty history".into(),
            ));
        }
        let newest = &history.back().expect("nonempty").1;
        let flat: Vec<f64> = newest.iter().flat_map(|p| [p.0, p.1]).collect();
        let current = tape.input(&flat, self.n_points, 2, false);
        self.predict_future_from(tape, store, history, current)
    }

    /// Same prediction, with the newest polyline supplied as a live tape
    /// value [n_points, 2] in meters (the current frame's decoded points),
    /// so gradients flow through it. The history buffer provides the older
    /// frames; its back entry is replaced by `current`.
    pub fn predict_future_from(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        history: &VecDeque<(usize, Vec<Point>)>,
        current: Var,
    ) -> Result<(Var, Var), PipelineError> {
        if history.is_empty() {
            return Err(PipelineError::Contract(
                "predict_future on an empty history".into(),
            ));
        }
        if tape.shape(current) != (self.n_points, 2) {
            return Err(PipelineError::Contract(format!(
                "current polyline var must be [{}, 2]",
                self.n_points
            )));
        }
        let inv_scale_row: Vec<f64> = (0..self.n_points)
            .flat_map(|_| [1.0 / self.x_half, 1.0 / self.y_half])
            .collect();
        let current_row = tape.reshape(current, 1, self.n_points * 2)?;
        let inv_scale = tape.constant(&inv_scale_row, 1, self.n_points * 2);
        let current_norm = tape.mul_bias(current_row, inv_scale)?;

        let older: Vec<&Vec<Point>> = history
            .iter()
            .take(history.len() - 1)
            .map(|(_, pts)| pts)
            .collect();
        let mut frames: Vec<Var> = Vec::with_capacity(self.n_history);
        let pad_count = self.n_history.saturating_sub(older.len() + 1);
        if older.is_empty() {
            // Single-frame history: every padded slot is the live polyline.
            frames.extend(std::iter::repeat(current_norm).take(pad_count));
        } else {
            let oldest_flat = self.normalized_const(tape, older[0])?;
            frames.extend(std::iter::repeat(oldest_flat).take(pad_count));
        }
        let keep = older.len().min(self.n_history.saturating_sub(1));
        for pts in older.iter().skip(older.len() - keep) {
            frames.push(self.normalized_const(tape, pts)?);
        }
        frames.push(current_norm);

        let mut input = frames[0];
        for f in &frames[1..] {
            input = tape.concat_cols(input, *f)?;
        }
        let layers = [
            (
                tape.param(store, "stfg.mlp.w0")?,
                tape.param(store, "stfg.mlp.b0")?,
            ),
            (
                tape.param(store, "stfg.mlp.w1")?,
                tape.param(store, "stfg.mlp.b1")?,
            ),
            (
                tape.param(store, "stfg.mlp.w2")?,
                tape.param(store, "stfg.mlp.b2")?,
            ),
        ];
        let normalized = tape.mlp(input, &layers, Activation::Relu)?;
        // De-normalize offsets back to meters.
        let scale_row: Vec<f64> = (0..self.n_points)
            .flat_map(|_| [self.x_half, self.y_half])
            .collect();
        let scale = tape.constant(&scale_row, 1, self.n_points * 2);
        let meters = tape.mul_bias(normalized, scale)?;
        let delta = tape.reshape(meters, self.n_points, 2)?;
        let p_hat = tape.add(current, delta)?;
        Ok((delta, p_hat))
    }

    fn normalized_const(
        &self,
        tape: &mut Tape,
        pts: &[Point],
    ) -> Result<Var, PipelineError> {
        if pts.len() != self.n_points {
            return Err(PipelineError::Contract(format!(
                "history polyline has {} points, expected {}",
                pts.len(),
                self.n_points
            )));
        }
        let flat: Vec<f64> = pts
            .iter()
            .flat_map(|p| [p.0 / self.x_half, p.1 / self.y_half])
            .collect();
        Ok(tape.constant(&flat, 1, self.n_points * 2))
    }

    /// Mean-pooled sinusoidal embedding of the predicted polyline followed
    /// by the learnable projection.
    pub fn future_embedding(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        p_hat: Var,
    ) -> Result<Var, TensorError> {
        let (n, two) = tape.shape(p_hat);
        if two != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "future_embedding",
                lhs: vec![n, two],
                rhs: vec![self.n_points, 2],
            });
        }
        let inv_scale = tape.constant(&[1.0 / self.x_half, 1.0 / self.y_half], 1, 2);
        let p_norm = tape.mul_bias(p_hat, inv_scale)?;
        // Frequency matrix: column pairs (w_i, 0) and (0, w_i), doubling.
        let freqs = self.c / 4;
        let mut fm = vec![0.0; 2 * 2 * freqs];
        for i in 0..freqs {
            let omega = std::f64::consts::FRAC_PI_2 * (1 << i) as f64;
            fm[2 * i] = omega; // x row
            fm[2 * freqs + 2 * i + 1] = omega; // y row
        }
        let freq = tape.constant(&fm, 2, 2 * freqs);
        let phases = tape.matmul(p_norm, freq)?;
        let sin = tape.sin_of(phases);
        let cos = tape.cos_of(phases);
        let feats = tape.concat_cols(sin, cos)?;
        let w = tape.param(store, "stfg.phi.w")?;
        let b = tape.param(store, "stfg.phi.b")?;
        let phi = tape.linear(feats, w, b)?;
        Ok(tape.mean_rows(phi))
    }

    /// Fuse the track query with the future embedding:
    /// linear([q, pe_future]) -> next-frame track query.
    pub fn fuse_future_guidance(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        q_track: Var,
        p_hat: Var,
    ) -> Result<Var, TensorError> {
        let pe_future = self.future_embedding(tape, store, p_hat)?;
        let joint = tape.concat_cols(q_track, pe_future)?;
        let w = tape.param(store, "stfg.fuse.w")?;
        let b = tape.param(store, "stfg.fuse.b")?;
        tape.linear(joint, w, b)
    }
}

/// Chamfer loss between the predicted polyline (on the tape) and the
/// ground-truth next-frame points.
pub fn pred_loss(tape: &mut Tape, p_hat: Var, gt_next: &[Point]) -> Result<Var, TensorError> {
    tape.chamfer_to_const(p_hat, gt_next)
}
