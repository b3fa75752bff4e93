//! Per-frame orchestration: decoding detection and track queries into map
//! instances, the track lifecycle, matching-based supervision, and the
//! combined training loss.

mod decode;
pub mod hungarian;

pub use decode::{DecodeNet, DecodeOutput};
pub use hungarian::{point_cost, solve_assignment};

use std::collections::BTreeSet;

use crate::error::PipelineError;
use crate::geometry::{GridWindow, Point, RasterMask};
use crate::hmg::{sample_guided_features, valid_mask, HmgNet, PositionEmbeddingGrid};
use crate::memory::HistoryMapMemory;
use crate::records::LogRecord;
use crate::saqg::{seg_loss, SaqgNet};
use crate::stfg::{StfgNet, TrajectoryStore};
use crate::tensor::{ParamGrads, ParameterStore, Tape, Var};
use crate::world::{FrameObservation, GtInstance, MapClass, NUM_CLASSES};

/// Global pipeline configuration: query/point counts, thresholds, grid
/// geometry, loss weights, and optimizer settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    pub n_q: usize,
    pub n_p: usize,
    pub c: usize,
    /// Query-generator decoding layers.
    pub l_layers: usize,
    /// Map-decoder blocks.
    pub d_blocks: usize,
    /// Trajectory history length.
    pub n_history: usize,
    pub tau_d: f64,
    pub tau_t: f64,
    pub tau_l: f64,
    pub beta: f64,
    pub theta: f64,
    pub window: GridWindow,
    pub resolution: f64,
    /// Cap on guidance cells sampled per track.
    pub k_max: usize,
    /// Cap on simultaneously live tracks; new births are admitted by score
    /// until the cap is reached.
    pub max_tracks: usize,
    pub w_cls: f64,
    pub w_pts: f64,
    pub w_score: f64,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub enable_hmg: bool,
    pub enable_stfg: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_q: 16,
            n_p: 20,
            c: 32,
            l_layers: 3,
            d_blocks: 2,
            n_history: 4,
            tau_d: 0.4,
            tau_t: 0.5,
            tau_l: 0.5,
            beta: 0.9,
            theta: 0.5,
            window: GridWindow::new(-16.0, 16.0, -16.0, 16.0),
            resolution: 0.5,
            k_max: 256,
            max_tracks: 24,
            w_cls: 2.0,
            w_pts: 5.0,
            w_score: 1.0,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            enable_hmg: true,
            enable_stfg: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("tau_d", self.tau_d),
            ("tau_t", self.tau_t),
            ("tau_l", self.tau_l),
            ("theta", self.theta),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(PipelineError::Contract(format!(
                    "{name} = {v} outside (0,1)"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(PipelineError::Contract(format!(
                "beta = {} outside [0,1]",
                self.beta
            )));
        }
        if self.n_q == 0 || self.n_p < 2 {
            return Err(PipelineError::Contract(format!(
                "need n_q >= 1 and n_p >= 2 (n_q={}, n_p={})",
                self.n_q, self.n_p
            )));
        }
        if self.c < 4 || self.c % 4 != 0 {
            return Err(PipelineError::Contract(format!(
                "c must be a positive multiple of 4, got {}",
                self.c
            )));
        }
        if self.l_layers == 0 || self.d_blocks == 0 || self.n_history == 0 {
            return Err(PipelineError::Contract(
                "l_layers, d_blocks, and n_history must be >= 1".into(),
            ));
        }
        if self.max_tracks == 0 || self.k_max == 0 {
            return Err(PipelineError::Contract(
                "max_tracks and k_max must be >= 1".into(),
            ));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(PipelineError::Contract(format!(
                "need lr > 0 and momentum in [0,1) (lr={}, momentum={})",
                self.lr, self.momentum
            )));
        }
        crate::geometry::grid_dims(&self.window, self.resolution)
            .map_err(PipelineError::Geometry)?;
        Ok(())
    }
}

/// All sub-networks registered against one parameter store.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub cfg: PipelineConfig,
    pub saqg: SaqgNet,
    pub hmg: HmgNet,
    pub stfg: StfgNet,
    pub decode: DecodeNet,
    pub pe: PositionEmbeddingGrid,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PipelineModel {
    pub fn new(store: &mut ParameterStore, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let (h, w) =
            crate::geometry::grid_dims(&cfg.window, cfg.resolution).map_err(PipelineError::Geometry)?;
        let saqg = SaqgNet::register(store, cfg.n_q, cfg.c, cfg.l_layers, cfg.tau_l);
        let hmg = HmgNet::register(store, cfg.c, cfg.theta, cfg.k_max);
        let (hx, hy) = cfg.window.half_extents();
        let stfg = StfgNet::register(store, cfg.c, cfg.n_history, cfg.n_p, hx, hy);
        let decode = DecodeNet::register(store, cfg.c, cfg.d_blocks, cfg.n_p, &cfg.window);
        let pe = PositionEmbeddingGrid::new(h, w, cfg.c);
        Ok(Self {
            cfg: cfg.clone(),
            saqg,
            hmg,
            stfg,
            decode,
            pe,
            grid_h: h,
            grid_w: w,
        })
    }
}

/// One live tracked instance.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub class: MapClass,
    /// Propagated query embedding for the next frame (post guidance).
    pub query: Vec<f64>,
    pub score: f64,
    /// Prediction of where this instance's polyline lands next frame, in
    /// next-frame ego coordinates.
    pub predicted_next: Option<Vec<Point>>,
    /// Ground-truth instance matched at birth (training only).
    pub gt_assoc: Option<u64>,
    pub birth_frame: usize,
}

/// Query, memory, and trajectory state carried across frames. The three
/// stores always hold exactly the same live track ids between frames.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub tracks: Vec<Track>,
    pub memory: HistoryMapMemory,
    pub histories: TrajectoryStore,
    pub next_track_id: u64,
    pending_motion: Option<crate::geometry::Se2Pose>,
    frame_cursor: usize,
}

impl TrackState {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            tracks: Vec::new(),
            memory: HistoryMapMemory::new(cfg.window, cfg.resolution),
            histories: TrajectoryStore::new(cfg.n_history, cfg.n_p),
            next_track_id: 1,
            pending_motion: None,
            frame_cursor: 0,
        }
    }

    pub fn live_ids(&self) -> BTreeSet<u64> {
        self.tracks.iter().map(|t| t.id).collect()
    }

    /// The shared live-id invariant across queries, memory, and histories.
    pub fn check_consistency(&self) -> Result<(), PipelineError> {
        let ids = self.live_ids();
        if ids.len() != self.tracks.len() {
            return Err(PipelineError::InconsistentState(
                "duplicate track ids".into(),
            ));
        }
        let mem_ids: BTreeSet<u64> = self.memory.track_ids().collect();
        let hist_ids: BTreeSet<u64> = self.histories.track_ids().collect();
        if ids != mem_ids || ids != hist_ids {
            return Err(PipelineError::InconsistentState(format!(
                "live ids diverged: queries {ids:?}, memory {mem_ids:?}, histories {hist_ids:?}"
            )));
        }
        Ok(())
    }

    pub fn frame_cursor(&self) -> usize {
        self.frame_cursor
    }
}

/// One retained instance of a frame.
#[derive(Debug, Clone)]
pub struct OutputInstance {
    pub track_id: u64,
    pub class: MapClass,
    pub score: f64,
    pub polyline: Vec<Point>,
    /// Current memory-facing segmentation mask values (cells).
    pub mask: Vec<f64>,
    pub predicted_next: Option<Vec<Point>>,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame_index: usize,
    pub instances: Vec<OutputInstance>,
    pub born: usize,
    pub killed: usize,
    pub propagated: usize,
}

impl FrameOutput {
    pub fn to_records(&self, sequence: &str) -> Vec<LogRecord> {
        self.instances
            .iter()
            .map(|inst| LogRecord {
                sequence: sequence.to_string(),
                frame_index: self.frame_index,
                track_id: inst.track_id,
                class: inst.class,
                score: inst.score,
                points: inst.polyline.clone(),
                pred_next: inst.predicted_next.clone(),
            })
            .collect()
    }
}

/// Supervision for the current frame when training.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainContext<'a> {
    /// Ground truth of the next frame, in next-frame ego coordinates; used
    /// by the future-prediction loss.
    pub next_gt: Option<&'a [GtInstance]>,
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub total: f64,
    pub track_loss: f64,
    pub seg_loss: f64,
    pub pred_loss: f64,
    pub grads: ParamGrads,
}

#[derive(Debug)]
pub struct StepResult {
    pub output: FrameOutput,
    pub train: Option<TrainStats>,
}

/// Full supervision for one matched query row.
#[derive(Debug, Clone)]
pub struct RowTarget {
    pub row: usize,
    pub class_id: usize,
    /// Ground-truth points reordered into the admissible ordering that
    /// minimizes the point cost.
    pub points: Vec<Point>,
}

/// Everything `total_loss` consumes.
pub struct LossBundle<'a> {
    pub points: Var,
    pub class_logits: Var,
    pub scores: Var,
    pub matched: Vec<RowTarget>,
    pub masks: Var,
    pub seg_pairs: Vec<(usize, &'a RasterMask)>,
    pub pred_pairs: Vec<(Var, Vec<Point>)>,
    pub w_cls: f64,
    pub w_pts: f64,
    pub w_score: f64,
}

/// Combined loss: class cross-entropy and point L1 averaged over matched
/// rows, score BCE summed over every row (target 1 when matched), the
/// dice+BCE segmentation loss over matched detection masks, and the mean
/// Chamfer future-prediction loss.
pub fn total_loss(
    tape: &mut Tape,
    bundle: &LossBundle<'_>,
) -> Result<(Var, f64, f64, f64), PipelineError> {
    let (n_rows, _) = tape.shape(bundle.scores);
    let mut score_targets = vec![0.0; n_rows];
    for m in &bundle.matched {
        score_targets[m.row] = 1.0;
    }
    let score_term = tape.bce(
        bundle.scores,
        &score_targets,
        crate::tensor::Reduction::Sum,
    )?;
    let mut track_term = tape.affine(score_term, bundle.w_score, 0.0);

    if !bundle.matched.is_empty() {
        let rows: Vec<usize> = bundle.matched.iter().map(|m| m.row).collect();
        let cls_targets: Vec<usize> = bundle.matched.iter().map(|m| m.class_id).collect();
        let logits = tape.gather_rows(bundle.class_logits, &rows)?;
        let ce = tape.cross_entropy_rows(logits, &cls_targets)?;
        let ce_w = tape.affine(ce, bundle.w_cls, 0.0);
        track_term = tape.add(track_term, ce_w)?;

        let mut pts_sum: Option<Var> = None;
        for m in &bundle.matched {
            let row = tape.gather_rows(bundle.points, &[m.row])?;
            let flat: Vec<f64> = m.points.iter().flat_map(|p| [p.0, p.1]).collect();
            let target = tape.constant(&flat, 1, flat.len());
            let diff = tape.sub(row, target)?;
            let l1 = tape.abs_of(diff);
            let mean = tape.mean_all(l1);
            pts_sum = Some(match pts_sum {
                Some(acc) => tape.add(acc, mean)?,
                None => mean,
            });
        }
        let pts_mean = tape.affine(
            pts_sum.expect("nonempty matched"),
            1.0 / bundle.matched.len() as f64,
            0.0,
        );
        let pts_w = tape.affine(pts_mean, bundle.w_pts, 0.0);
        track_term = tape.add(track_term, pts_w)?;
    }

    let seg_term = seg_loss(tape, bundle.masks, &bundle.seg_pairs)?;

    let mut pred_term = tape.constant_scalar(0.0);
    if !bundle.pred_pairs.is_empty() {
        let mut acc: Option<Var> = None;
        for (p_hat, gt) in &bundle.pred_pairs {
            let cd = tape.chamfer_to_const(*p_hat, gt)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, cd)?,
                None => cd,
            });
        }
        pred_term = tape.affine(
            acc.expect("nonempty pred pairs"),
            1.0 / bundle.pred_pairs.len() as f64,
            0.0,
        );
    }

    let track_val = tape.scalar(track_term);
    let seg_val = tape.scalar(seg_term);
    let pred_val = tape.scalar(pred_term);
    let partial = tape.add(track_term, seg_term)?;
    let total = tape.add(partial, pred_term)?;
    Ok((total, track_val, seg_val, pred_val))
}

/// Instance-level optimal matching between predictions and ground truths:
/// cost = w_cls * (1 - p_class(gt)) + w_pts * point_cost. Returns
/// (pred index, gt index, reordered gt points) triples; unmatched entries
/// on either side are simply absent.
pub fn hungarian_match(
    preds: &[(Vec<f64>, Vec<Point>)],
    gts: &[(usize, Vec<Point>, bool)],
    w_cls: f64,
    w_pts: f64,
) -> Vec<(usize, usize, Vec<Point>)> {
    if preds.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|(logits, points)| {
            gts.iter()
                .map(|(class_id, gt_points, closed)| {
                    let p = softmax3(logits)[*class_id];
                    let (pc, _) = point_cost(points, gt_points, *closed);
                    w_cls * (1.0 - p) + w_pts * pc
                })
                .collect()
        })
        .collect();
    let assign = solve_assignment(&cost);
    assign
        .into_iter()
        .enumerate()
        .filter_map(|(pi, gj)| {
            gj.map(|gj| {
                let (_, reordered) = point_cost(&preds[pi].1, &gts[gj].1, gts[gj].2);
                (pi, gj, reordered)
            })
        })
        .collect()
}

fn softmax3(logits: &[f64]) -> [f64; 3] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    [exps[0] / sum, exps[1] / sum, exps[2] / sum]
}

fn rows_to_points(flat: &[f64], n_p: usize) -> Vec<Point> {
    (0..n_p).map(|i| (flat[2 * i], flat[2 * i + 1])).collect()
}

/// Pure lifecycle decision on decoded scores. Rows 0..n_q are detections,
/// rows n_q.. are the live tracks in order. Tracks survive when their
/// score reaches tau_t; detections are born when their score reaches
/// tau_d, admitted best-score-first (ties to the lower row) into whatever
/// capacity the survivors leave under max_tracks. Surviving tracks are
/// never evicted, so a continuously confident track keeps its identity.
/// Returns (surviving track indices, birth detection rows), both ascending.
pub fn select_lifecycle(
    scores: &[f64],
    n_q: usize,
    n_tracks: usize,
    tau_d: f64,
    tau_t: f64,
    max_tracks: usize,
) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(scores.len(), n_q + n_tracks);
    let survivors: Vec<usize> = (0..n_tracks)
        .filter(|ti| scores[n_q + ti] >= tau_t)
        .collect();
    let mut birth_rows: Vec<usize> = (0..n_q).filter(|r| scores[*r] >= tau_d).collect();
    birth_rows.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .expect("finite scores")
            .then(a.cmp(b))
    });
    let capacity = max_tracks.saturating_sub(survivors.len());
    birth_rows.truncate(capacity);
    birth_rows.sort_unstable();
    (survivors, birth_rows)
}

/// Run one frame through the pipeline. The fixed step order is: warp and
/// re-frame carried state by the previous ego motion, guidance-refine
/// track queries, generate semantic-aware detection queries, decode
/// [detections; tracks], apply the score lifecycle, update the mask
/// memory, push trajectory histories, and finally predict-and-fuse future
/// guidance into the next frame's track queries. Training additionally
/// matches outputs to ground truth and returns the loss with its
/// parameter gradients.
pub fn step_frame(
    model: &PipelineModel,
    store: &ParameterStore,
    state: &mut TrackState,
    obs: &FrameObservation,
    train: Option<TrainContext<'_>>,
) -> Result<StepResult, PipelineError> {
    state.check_consistency()?;
    let cfg = &model.cfg;
    if obs.bev.h != model.grid_h || obs.bev.w != model.grid_w || obs.bev.c != cfg.c {
        return Err(PipelineError::Contract(format!(
            "observation grid {}x{}x{} does not match model {}x{}x{}",
            obs.bev.h, obs.bev.w, obs.bev.c, model.grid_h, model.grid_w, cfg.c
        )));
    }
    if obs.frame_index != state.frame_cursor {
        return Err(PipelineError::Contract(format!(
            "frames must be stepped in order: expected {}, got {}",
            state.frame_cursor, obs.frame_index
        )));
    }

    // (1) Align carried state with the motion since the previous frame.
    if let Some(motion) = state.pending_motion.take() {
        state.memory.warp(&motion)?;
        state.histories.advance_frame(&motion);
    }

    let cells = obs.bev.cells();
    let mut tape = Tape::new();
    let f_bev = tape.input(&obs.bev.data, cells, cfg.c, false);
    let pe = tape.constant(&model.pe.data, cells, cfg.c);
    let f_kv = tape.add(f_bev, pe)?;

    // (2) History-map guidance over the propagated track queries.
    let mut track_vars: Vec<Var> = Vec::with_capacity(state.tracks.len());
    for track in &state.tracks {
        let q = tape.input(&track.query, 1, cfg.c, false);
        let refined = if cfg.enable_hmg {
            match state.memory.get(track.id) {
                Some(entry) => {
                    let valid = valid_mask(&entry.mask, cfg.theta)?;
                    let sampled = sample_guided_features(
                        &mut tape,
                        f_kv,
                        &valid,
                        &entry.mask.grid,
                        cfg.k_max,
                    )?;
                    model
                        .hmg
                        .refine_query(&mut tape, store, q, track.class.id(), sampled)?
                }
                None => q,
            }
        } else {
            q
        };
        track_vars.push(refined);
    }

    // (3) Semantic-aware detection queries and their masks.
    let saqg_out = model.saqg.forward(&mut tape, store, f_kv, f_bev)?;

    // (4) Decode [detections; tracks].
    let mut all_q = saqg_out.queries;
    for tv in &track_vars {
        all_q = tape.concat_rows(all_q, *tv)?;
    }
    let decoded = model.decode.forward(&mut tape, store, all_q, f_kv)?;

    let n_rows = cfg.n_q + state.tracks.len();
    let scores: Vec<f64> = tape.value(decoded.scores).to_vec();
    let all_points: Vec<f64> = tape.value(decoded.points).to_vec();
    let all_logits: Vec<f64> = tape.value(decoded.class_logits).to_vec();
    debug_assert_eq!(scores.len(), n_rows);

    // Training matching happens on the raw decoded rows, before lifecycle.
    let mut det_match: Vec<(usize, usize, Vec<Point>)> = Vec::new();
    let mut matched_rows: Vec<RowTarget> = Vec::new();
    if train.is_some() {
        let claimed: BTreeSet<u64> = state.tracks.iter().filter_map(|t| t.gt_assoc).collect();
        let pool: Vec<usize> = (0..obs.gt_instances.len())
            .filter(|gi| !claimed.contains(&obs.gt_instances[*gi].instance_id))
            .collect();
        let preds: Vec<(Vec<f64>, Vec<Point>)> = (0..cfg.n_q)
            .map(|row| {
                (
                    all_logits[row * NUM_CLASSES..(row + 1) * NUM_CLASSES].to_vec(),
                    rows_to_points(&all_points[row * cfg.n_p * 2..(row + 1) * cfg.n_p * 2], cfg.n_p),
                )
            })
            .collect();
        let gts: Vec<(usize, Vec<Point>, bool)> = pool
            .iter()
            .map(|gi| {
                let gt = &obs.gt_instances[*gi];
                (
                    gt.class.id(),
                    gt.polyline.points.clone(),
                    gt.polyline.closed,
                )
            })
            .collect();
        det_match = hungarian_match(&preds, &gts, cfg.w_cls, cfg.w_pts)
            .into_iter()
            .map(|(pi, gj, reordered)| (pi, pool[gj], reordered))
            .collect();
        for (pi, gi, reordered) in &det_match {
            matched_rows.push(RowTarget {
                row: *pi,
                class_id: obs.gt_instances[*gi].class.id(),
                points: reordered.clone(),
            });
        }
        // Tracks supervise against their birth-matched instance while it
        // stays visible.
        for (ti, track) in state.tracks.iter().enumerate() {
            let Some(assoc) = track.gt_assoc else { continue };
            let Some(gt) = obs
                .gt_instances
                .iter()
                .find(|g| g.instance_id == assoc)
            else {
                continue;
            };
            let row = cfg.n_q + ti;
            let pred_points =
                rows_to_points(&all_points[row * cfg.n_p * 2..(row + 1) * cfg.n_p * 2], cfg.n_p);
            let (_, reordered) =
                point_cost(&pred_points, &gt.polyline.points, gt.polyline.closed);
            matched_rows.push(RowTarget {
                row,
                class_id: gt.class.id(),
                points: reordered,
            });
        }
    }

    // (5) Lifecycle: existing tracks survive by tau_t; detections are born
    // by tau_d, best scores first, up to the track cap.
    struct Retained {
        row: usize,
        id: u64,
        class: MapClass,
        gt_assoc: Option<u64>,
        birth_frame: usize,
        is_birth: bool,
    }
    let (surviving_tracks, birth_rows) = select_lifecycle(
        &scores,
        cfg.n_q,
        state.tracks.len(),
        cfg.tau_d,
        cfg.tau_t,
        cfg.max_tracks,
    );
    let killed = state.tracks.len() - surviving_tracks.len();
    let mut retained: Vec<Retained> = Vec::new();
    for ti in surviving_tracks {
        let track = &state.tracks[ti];
        retained.push(Retained {
            row: cfg.n_q + ti,
            id: track.id,
            class: track.class,
            gt_assoc: track.gt_assoc,
            birth_frame: track.birth_frame,
            is_birth: false,
        });
    }
    let survivors = retained.len();
    for row in birth_rows {
        let id = state.next_track_id;
        state.next_track_id += 1;
        let logits = &all_logits[row * NUM_CLASSES..(row + 1) * NUM_CLASSES];
        let class_id = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("three classes");
        let gt_assoc = det_match
            .iter()
            .find(|(pi, _, _)| *pi == row)
            .map(|(_, gi, _)| obs.gt_instances[*gi].instance_id);
        retained.push(Retained {
            row,
            id,
            class: MapClass::from_id(class_id).expect("argmax in range"),
            gt_assoc,
            birth_frame: obs.frame_index,
            is_birth: true,
        });
    }
    let born = retained.iter().filter(|r| r.is_birth).count();

    // (6) Memory masks for every retained instance come from the shared
    // mask head applied to the decoded embeddings.
    let retained_rows: Vec<usize> = retained.iter().map(|r| r.row).collect();
    let mut memory_mask_values: Vec<Vec<f64>> = Vec::new();
    if !retained.is_empty() {
        let emb = tape.gather_rows(decoded.embeddings, &retained_rows)?;
        let masks = model
            .saqg
            .predict_masks(&mut tape, emb, saqg_out.f_proj)?;
        let values = tape.value(masks);
        for i in 0..retained.len() {
            memory_mask_values.push(values[i * cells..(i + 1) * cells].to_vec());
        }
    }
    let live_ids: BTreeSet<u64> = retained.iter().map(|r| r.id).collect();
    for (r, mask_values) in retained.iter().zip(&memory_mask_values) {
        let mask = RasterMask {
            grid: mask_values.clone(),
            h: model.grid_h,
            w: model.grid_w,
            window: cfg.window,
            resolution: cfg.resolution,
        };
        let score = scores[r.row];
        if r.is_birth {
            state
                .memory
                .init_entry(r.id, &mask, score, r.class, obs.frame_index)?;
        } else {
            state
                .memory
                .update_entry(r.id, &mask, score, cfg.beta, obs.frame_index)?;
        }
    }
    state.memory.prune(&live_ids);

    // (7) Trajectory histories.
    state.histories.retain_live(&live_ids);
    for r in &retained {
        let pts = rows_to_points(
            &all_points[r.row * cfg.n_p * 2..(r.row + 1) * cfg.n_p * 2],
            cfg.n_p,
        );
        state.histories.push(r.id, obs.frame_index, pts)?;
    }

    // (8) Future guidance forms the next frame's track queries.
    let emb_values = tape.value(decoded.embeddings).to_vec();
    let mut new_tracks: Vec<Track> = Vec::with_capacity(retained.len());
    let mut pred_pairs: Vec<(Var, Vec<Point>)> = Vec::new();
    let mut predicted_next: Vec<Option<Vec<Point>>> = Vec::new();
    for r in &retained {
        let emb_row = tape.gather_rows(decoded.embeddings, &[r.row])?;
        let (query_var, pred_pts) = if cfg.enable_stfg {
            let hist = state
                .histories
                .get(r.id)
                .expect("retained track has a history");
            // The newest history entry is this frame's decoded polyline;
            // feed it as a live value so the prediction loss reaches the
            // decoder within the frame.
            let points_row = tape.gather_rows(decoded.points, &[r.row])?;
            let current = tape.reshape(points_row, cfg.n_p, 2)?;
            let (_, p_hat) =
                model
                    .stfg
                    .predict_future_from(&mut tape, store, hist, current)?;
            let fused = model
                .stfg
                .fuse_future_guidance(&mut tape, store, emb_row, p_hat)?;
            if let Some(ctx) = &train {
                if let (Some(next_gt), Some(assoc)) = (ctx.next_gt, r.gt_assoc) {
                    if let Some(gt) = next_gt.iter().find(|g| g.instance_id == assoc) {
                        pred_pairs.push((p_hat, gt.polyline.points.clone()));
                    }
                }
            }
            (fused, Some(rows_to_points(tape.value(p_hat), cfg.n_p)))
        } else {
            (emb_row, None)
        };
        predicted_next.push(pred_pts.clone());
        new_tracks.push(Track {
            id: r.id,
            class: r.class,
            query: tape.value(query_var).to_vec(),
            score: scores[r.row],
            predicted_next: pred_pts,
            gt_assoc: r.gt_assoc,
            birth_frame: r.birth_frame,
        });
        let _ = emb_values;
    }

    // (9) Loss and gradients.
    let train_stats = if train.is_some() {
        let seg_pairs: Vec<(usize, &RasterMask)> = det_match
            .iter()
            .map(|(pi, gi, _)| (*pi, &obs.gt_masks[*gi]))
            .collect();
        let bundle = LossBundle {
            points: decoded.points,
            class_logits: decoded.class_logits,
            scores: decoded.scores,
            matched: matched_rows,
            masks: saqg_out.masks,
            seg_pairs,
            pred_pairs,
            w_cls: cfg.w_cls,
            w_pts: cfg.w_pts,
            w_score: cfg.w_score,
        };
        let (total, track_val, seg_val, pred_val) = total_loss(&mut tape, &bundle)?;
        let total_val = tape.scalar(total);
        if !total_val.is_finite() {
            return Err(PipelineError::Tensor(crate::error::TensorError::NonFinite(
                "frame loss",
            )));
        }
        tape.backward(total).map_err(PipelineError::Tensor)?;
        Some(TrainStats {
            total: total_val,
            track_loss: track_val,
            seg_loss: seg_val,
            pred_loss: pred_val,
            grads: tape.param_grads(),
        })
    } else {
        None
    };

    // (10) Commit state and assemble the frame output.
    let instances: Vec<OutputInstance> = retained
        .iter()
        .enumerate()
        .map(|(i, r)| OutputInstance {
            track_id: r.id,
            class: r.class,
            score: scores[r.row],
            polyline: rows_to_points(
                &all_points[r.row * cfg.n_p * 2..(r.row + 1) * cfg.n_p * 2],
                cfg.n_p,
            ),
            mask: memory_mask_values[i].clone(),
            predicted_next: predicted_next[i].clone(),
        })
        .collect();
    state.tracks = new_tracks;
    state.pending_motion = Some(obs.ego_motion_to_next);
    state.frame_cursor = obs.frame_index + 1;
    state.check_consistency()?;

    Ok(StepResult {
        output: FrameOutput {
            frame_index: obs.frame_index,
            instances,
            born,
            killed,
            propagated: survivors,
        },
        train: train_stats,
    })
}

#[cfg(test)]
mod tests;
