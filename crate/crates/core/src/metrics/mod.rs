//! Evaluation suite: Chamfer-distance AP, rasterization-IoU AP, and a
//! consistency-aware mAP variant over prediction/ground-truth logs.
//!
//! Matching follows detection-AP practice: predictions are pooled over all
//! frames and ranked by descending score (ties by frame then insertion
//! order); each prediction greedily takes the best unmatched same-frame
//! same-class ground truth (lowest Chamfer distance / highest IoU) and
//! counts as a true positive only when it passes the threshold, otherwise
//! the ground truth stays available. AP integrates the precision envelope
//! over recall at every point.

use std::collections::BTreeMap;

use crate::error::MetricsError;
use crate::geometry::{chamfer, rasterize, GridWindow, Point, Polyline, RasterMask};
use crate::records::LogRecord;
use crate::world::{MapClass, NUM_CLASSES};

pub const CHAMFER_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];
pub const RASTER_THRESHOLDS_CROSSING: [f64; 6] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75];
pub const RASTER_THRESHOLDS_LINE: [f64; 6] = [0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

/// Per-class IoU threshold schedule: crossings use the high schedule,
/// line-shaped elements the low one.
pub fn raster_schedule(class: MapClass) -> &'static [f64; 6] {
    match class {
        MapClass::Crossing => &RASTER_THRESHOLDS_CROSSING,
        MapClass::Divider | MapClass::Boundary => &RASTER_THRESHOLDS_LINE,
    }
}

/// Flattened evaluation input: one entry per instance per frame, with
/// frames keyed by (sequence, frame index).
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub preds: Vec<EvalPred>,
    pub gts: Vec<EvalGt>,
}

#[derive(Debug, Clone)]
pub struct EvalPred {
    pub frame_key: usize,
    pub seq_key: usize,
    pub class: MapClass,
    pub score: f64,
    pub track_id: u64,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct EvalGt {
    pub frame_key: usize,
    pub seq_key: usize,
    pub class: MapClass,
    pub instance_id: u64,
    pub points: Vec<Point>,
}

impl EvalSet {
    /// Build from prediction and ground-truth logs sharing the record
    /// schema. Frame keys are assigned over the union of both logs.
    pub fn from_records(preds: &[LogRecord], gts: &[LogRecord]) -> Result<Self, MetricsError> {
        let mut frame_keys: BTreeMap<(String, usize), usize> = BTreeMap::new();
        let mut seq_keys: BTreeMap<String, usize> = BTreeMap::new();
        for r in preds.iter().chain(gts) {
            let next_seq = seq_keys.len();
            seq_keys.entry(r.sequence.clone()).or_insert(next_seq);
            let next_frame = frame_keys.len();
            frame_keys
                .entry((r.sequence.clone(), r.frame_index))
                .or_insert(next_frame);
        }
        let preds = preds
            .iter()
            .map(|r| EvalPred {
                frame_key: frame_keys[&(r.sequence.clone(), r.frame_index)],
                seq_key: seq_keys[&r.sequence],
                class: r.class,
                score: r.score,
                track_id: r.track_id,
                points: r.points.clone(),
            })
            .collect();
        let gts = gts
            .iter()
            .map(|r| EvalGt {
                frame_key: frame_keys[&(r.sequence.clone(), r.frame_index)],
                seq_key: seq_keys[&r.sequence],
                class: r.class,
                instance_id: r.track_id,
                points: r.points.clone(),
            })
            .collect();
        Ok(Self { preds, gts })
    }
}

/// AP value plus a warning flag raised when the class has no ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOutcome {
    pub ap: f64,
    pub zero_gt: bool,
}

/// One ranked prediction's matching outcome.
#[derive(Debug, Clone, Copy)]
struct MatchOutcome {
    pred_idx: usize,
    /// Index into the class gt list when the prediction scored a TP.
    matched_gt: Option<usize>,
}

/// Rank class predictions by descending score, ties broken by frame then
/// insertion order. Returns indices into `set.preds`.
fn ranked_class_preds(set: &EvalSet, class: MapClass) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.preds.len())
        .filter(|i| set.preds[*i].class == class)
        .collect();
    idx.sort_by(|a, b| {
        set.preds[*b]
            .score
            .partial_cmp(&set.preds[*a].score)
            .expect("finite scores")
            .then(set.preds[*a].frame_key.cmp(&set.preds[*b].frame_key))
            .then(a.cmp(b))
    });
    idx
}

fn class_gts(set: &EvalSet, class: MapClass) -> Vec<usize> {
    (0..set.gts.len())
        .filter(|i| set.gts[*i].class == class)
        .collect()
}

/// Greedy Chamfer matching at one threshold. Returns outcomes in rank
/// order; `matched_gt` holds positions into the class-gt list.
fn chamfer_matches(set: &EvalSet, class: MapClass, threshold: f64) -> Vec<MatchOutcome> {
    let ranked = ranked_class_preds(set, class);
    let gt_idx = class_gts(set, class);
    let mut taken = vec![false; gt_idx.len()];
    let mut outcomes = Vec::with_capacity(ranked.len());
    for pi in ranked {
        let pred = &set.preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (slot, gi) in gt_idx.iter().enumerate() {
            let gt = &set.gts[*gi];
            if taken[slot] || gt.frame_key != pred.frame_key {
                continue;
            }
            let cd = chamfer(&pred.points, &gt.points).expect("nonempty point sets");
            let better = match best {
                None => true,
                Some((_, bd)) => cd < bd,
            };
            if better {
                best = Some((slot, cd));
            }
        }
        let matched_gt = match best {
            Some((slot, cd)) if cd <= threshold => {
                taken[slot] = true;
                Some(slot)
            }
            _ => None,
        };
        outcomes.push(MatchOutcome {
            pred_idx: pi,
            matched_gt,
        });
    }
    outcomes
}

/// Area under the precision envelope over recall (all-point form).
fn ap_from_labels(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut precisions = Vec::with_capacity(n);
    let mut cum_tp = 0usize;
    for (i, tp) in tp_flags.iter().enumerate() {
        if *tp {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (i + 1) as f64);
    }
    // Envelope from the right, accumulated at TP ranks.
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    for i in (0..n).rev() {
        envelope = envelope.max(precisions[i]);
        if tp_flags[i] {
            ap += envelope / n_gt as f64;
        }
    }
    ap
}

/// Chamfer-distance AP for one class at one threshold in meters.
pub fn chamfer_ap(set: &EvalSet, class: MapClass, threshold: f64) -> Result<ApOutcome, MetricsError> {
    if threshold <= 0.0 {
        return Err(MetricsError::Contract(format!(
            "chamfer threshold must be positive, got {threshold}"
        )));
    }
    let n_gt = class_gts(set, class).len();
    if n_gt == 0 {
        return Ok(ApOutcome {
            ap: 0.0,
            zero_gt: true,
        });
    }
    let outcomes = chamfer_matches(set, class, threshold);
    let flags: Vec<bool> = outcomes.iter().map(|o| o.matched_gt.is_some()).collect();
    Ok(ApOutcome {
        ap: ap_from_labels(&flags, n_gt),
        zero_gt: false,
    })
}

/// Rasterization-IoU AP for one class over its threshold schedule.
/// Polylines are rasterized on the given grid: crossings filled, lines at
/// the default thickness.
pub fn raster_ap(
    set: &EvalSet,
    class: MapClass,
    window: GridWindow,
    resolution: f64,
) -> Result<Vec<(f64, ApOutcome)>, MetricsError> {
    let gt_idx = class_gts(set, class);
    let ranked = ranked_class_preds(set, class);
    let schedule = raster_schedule(class);
    if gt_idx.is_empty() {
        return Ok(schedule
            .iter()
            .map(|t| {
                (
                    *t,
                    ApOutcome {
                        ap: 0.0,
                        zero_gt: true,
                    },
                )
            })
            .collect());
    }
    let closed = class == MapClass::Crossing;
    let to_mask = |points: &[Point]| -> Result<RasterMask, MetricsError> {
        let poly = Polyline::new(points.to_vec(), closed)
            .map_err(|e| MetricsError::Contract(e.to_string()))?;
        rasterize(
            &poly,
            window,
            resolution,
            crate::world::LINE_THICKNESS,
        )
        .map_err(|e| MetricsError::Contract(e.to_string()))
    };
    let pred_masks: Vec<RasterMask> = ranked
        .iter()
        .map(|pi| to_mask(&set.preds[*pi].points))
        .collect::<Result<_, _>>()?;
    let gt_masks: Vec<RasterMask> = gt_idx
        .iter()
        .map(|gi| to_mask(&set.gts[*gi].points))
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(schedule.len());
    for threshold in schedule {
        let mut taken = vec![false; gt_idx.len()];
        let mut flags = Vec::with_capacity(ranked.len());
        for (rank, pi) in ranked.iter().enumerate() {
            let pred = &set.preds[*pi];
            let mut best: Option<(usize, f64)> = None;
            for (slot, gi) in gt_idx.iter().enumerate() {
                let gt = &set.gts[*gi];
                if taken[slot] || gt.frame_key != pred.frame_key {
                    continue;
                }
                let iou = mask_iou(&pred_masks[rank], &gt_masks[slot]);
                if iou <= 0.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bi)) => iou > bi,
                };
                if better {
                    best = Some((slot, iou));
                }
            }
            let tp = match best {
                Some((slot, iou)) if iou >= *threshold => {
                    taken[slot] = true;
                    true
                }
                _ => false,
            };
            flags.push(tp);
        }
        out.push((
            *threshold,
            ApOutcome {
                ap: ap_from_labels(&flags, gt_idx.len()),
                zero_gt: false,
            },
        ));
    }
    Ok(out)
}

/// Intersection-over-union of two binarized masks (cells > 0.5 count).
pub fn mask_iou(a: &RasterMask, b: &RasterMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.grid.iter().zip(&b.grid) {
        let xa = *x > 0.5;
        let yb = *y > 0.5;
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Consistency-aware AP (variant): Chamfer matching as in `chamfer_ap`,
/// then any true positive whose track does not majority-match its ground
/// truth — or whose ground truth's matches are split onto another majority
/// track — is demoted to a false positive and the AP recomputed. Tie-broken
/// toward the lowest id; demotion never creates new true positives, so the
/// result never exceeds the plain AP.
pub fn consistency_map(
    set: &EvalSet,
    class: MapClass,
    threshold: f64,
) -> Result<ApOutcome, MetricsError> {
    if threshold <= 0.0 {
        return Err(MetricsError::Contract(format!(
            "chamfer threshold must be positive, got {threshold}"
        )));
    }
    let gt_idx = class_gts(set, class);
    if gt_idx.is_empty() {
        return Ok(ApOutcome {
            ap: 0.0,
            zero_gt: true,
        });
    }
    let outcomes = chamfer_matches(set, class, threshold);

    // Count matches per (track, gt) pair; keys are sequence-scoped.
    type TrackKey = (usize, u64);
    type GtKey = (usize, u64);
    let mut pair_counts: BTreeMap<(TrackKey, GtKey), usize> = BTreeMap::new();
    for o in &outcomes {
        if let Some(slot) = o.matched_gt {
            let pred = &set.preds[o.pred_idx];
            let gt = &set.gts[gt_idx[slot]];
            let tk = (pred.seq_key, pred.track_id);
            let gk = (gt.seq_key, gt.instance_id);
            *pair_counts.entry((tk, gk)).or_insert(0) += 1;
        }
    }
    let mut majority_gt: BTreeMap<TrackKey, GtKey> = BTreeMap::new();
    let mut majority_track: BTreeMap<GtKey, TrackKey> = BTreeMap::new();
    {
        let mut best_for_track: BTreeMap<TrackKey, (usize, GtKey)> = BTreeMap::new();
        let mut best_for_gt: BTreeMap<GtKey, (usize, TrackKey)> = BTreeMap::new();
        for ((tk, gk), count) in &pair_counts {
            match best_for_track.get(tk) {
                Some((c, g)) if *c > *count || (*c == *count && *g <= *gk) => {}
                _ => {
                    best_for_track.insert(*tk, (*count, *gk));
                }
            }
            match best_for_gt.get(gk) {
                Some((c, t)) if *c > *count || (*c == *count && *t <= *tk) => {}
                _ => {
                    best_for_gt.insert(*gk, (*count, *tk));
                }
            }
        }
        for (tk, (_, gk)) in best_for_track {
            majority_gt.insert(tk, gk);
        }
        for (gk, (_, tk)) in best_for_gt {
            majority_track.insert(gk, tk);
        }
    }

    let flags: Vec<bool> = outcomes
        .iter()
        .map(|o| match o.matched_gt {
            Some(slot) => {
                let pred = &set.preds[o.pred_idx];
                let gt = &set.gts[gt_idx[slot]];
                let tk = (pred.seq_key, pred.track_id);
                let gk = (gt.seq_key, gt.instance_id);
                majority_gt.get(&tk) == Some(&gk) && majority_track.get(&gk) == Some(&tk)
            }
            None => false,
        })
        .collect();
    Ok(ApOutcome {
        ap: ap_from_labels(&flags, gt_idx.len()),
        zero_gt: false,
    })
}

// ── Aggregate report ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ApReport {
    /// (class, threshold) -> Chamfer AP.
    pub chamfer: Vec<(MapClass, f64, ApOutcome)>,
    /// (class, threshold) -> raster AP over the class schedule.
    pub raster: Vec<(MapClass, f64, ApOutcome)>,
    /// (class, threshold) -> consistency AP variant.
    pub consistency: Vec<(MapClass, f64, ApOutcome)>,
    pub map: f64,
    pub map_raster: f64,
    pub c_map_variant: f64,
    pub gt_counts: Vec<(MapClass, usize)>,
    pub pred_counts: Vec<(MapClass, usize)>,
}

pub const CLASSES: [MapClass; NUM_CLASSES] =
    [MapClass::Crossing, MapClass::Divider, MapClass::Boundary];

/// Run the full metric suite over an evaluation set.
pub fn evaluate(
    set: &EvalSet,
    window: GridWindow,
    resolution: f64,
) -> Result<ApReport, MetricsError> {
    let mut chamfer_rows = Vec::new();
    let mut raster_rows = Vec::new();
    let mut consistency_rows = Vec::new();
    let mut map_acc = 0.0;
    let mut raster_acc = 0.0;
    let mut c_acc = 0.0;
    for class in CLASSES {
        let mut class_chamfer = 0.0;
        let mut class_c = 0.0;
        for t in CHAMFER_THRESHOLDS {
            let ap = chamfer_ap(set, class, t)?;
            class_chamfer += ap.ap;
            chamfer_rows.push((class, t, ap));
            let c = consistency_map(set, class, t)?;
            class_c += c.ap;
            consistency_rows.push((class, t, c));
        }
        map_acc += class_chamfer / CHAMFER_THRESHOLDS.len() as f64;
        c_acc += class_c / CHAMFER_THRESHOLDS.len() as f64;

        let schedule = raster_ap(set, class, window, resolution)?;
        let mut class_raster = 0.0;
        for (t, ap) in &schedule {
            class_raster += ap.ap;
            raster_rows.push((class, *t, *ap));
        }
        raster_acc += class_raster / schedule.len() as f64;
    }
    let gt_counts = CLASSES
        .iter()
        .map(|c| (*c, class_gts(set, *c).len()))
        .collect();
    let pred_counts = CLASSES
        .iter()
        .map(|c| (*c, set.preds.iter().filter(|p| p.class == *c).count()))
        .collect();
    Ok(ApReport {
        chamfer: chamfer_rows,
        raster: raster_rows,
        consistency: consistency_rows,
        map: map_acc / NUM_CLASSES as f64,
        map_raster: raster_acc / NUM_CLASSES as f64,
        c_map_variant: c_acc / NUM_CLASSES as f64,
        gt_counts,
        pred_counts,
    })
}

/// Serialize a report as CSV with the fixed header
/// `class,metric,threshold,value`. Aggregates use class `all` and
/// threshold `mean`. The consistency rows are explicitly labeled as the
/// variant they are.
pub fn report_to_csv(report: &ApReport) -> String {
    let mut out = String::from("class,metric,threshold,value\n");
    for (class, t, ap) in &report.chamfer {
        out.push_str(&format!("{},chamfer_ap,{t},{}\n", class.name(), ap.ap));
    }
    for (class, t, ap) in &report.raster {
        out.push_str(&format!("{},raster_ap,{t},{}\n", class.name(), ap.ap));
    }
    for (class, t, ap) in &report.consistency {
        out.push_str(&format!("{},c_ap_variant,{t},{}\n", class.name(), ap.ap));
    }
    for (class, n) in &report.gt_counts {
        out.push_str(&format!("{},gt_count,-,{n}\n", class.name()));
    }
    for (class, n) in &report.pred_counts {
        out.push_str(&format!("{},pred_count,-,{n}\n", class.name()));
    }
    out.push_str(&format!("all,map,mean,{}\n", report.map));
    out.push_str(&format!("all,map_raster,mean,{}\n", report.map_raster));
    out.push_str(&format!("all,c_map_variant,mean,{}\n", report.c_map_variant));
    out
}

// ── Future-prediction loss over logs ────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct PredLossReport {
    /// Mean Chamfer distance of stored next-frame predictions to the
    /// ground truth they land on.
    pub predicted: f64,
    /// Mean Chamfer distance of the zero-offset baseline (yesterday's
    /// polyline, unmoved) to the same ground truth.
    pub zero_offset: f64,
    pub pairs: usize,
}

/// Evaluate stored future predictions against the next frame's ground
/// truth. For every track alive in consecutive frames with a stored
/// prediction, the target is the same-class ground-truth instance nearest
/// (by Chamfer) to the track's decoded polyline in the later frame; the
/// zero-offset baseline reuses the earlier frame's polyline unchanged.
pub fn pred_loss_report(
    preds: &[LogRecord],
    gts: &[LogRecord],
) -> Result<PredLossReport, MetricsError> {
    let mut by_track: BTreeMap<(String, u64, usize), &LogRecord> = BTreeMap::new();
    for r in preds {
        by_track.insert((r.sequence.clone(), r.track_id, r.frame_index), r);
    }
    let mut gt_by_frame: BTreeMap<(String, usize), Vec<&LogRecord>> = BTreeMap::new();
    for g in gts {
        gt_by_frame
            .entry((g.sequence.clone(), g.frame_index))
            .or_default()
            .push(g);
    }
    let mut sum_pred = 0.0;
    let mut sum_zero = 0.0;
    let mut pairs = 0usize;
    for ((seq, track, frame), record) in &by_track {
        let Some(pred_next) = &record.pred_next else {
            continue;
        };
        let Some(next) = by_track.get(&(seq.clone(), *track, frame + 1)) else {
            continue;
        };
        let Some(frame_gts) = gt_by_frame.get(&(seq.clone(), frame + 1)) else {
            continue;
        };
        let mut best: Option<(f64, &LogRecord)> = None;
        for g in frame_gts {
            if g.class != next.class {
                continue;
            }
            let cd = chamfer(&next.points, &g.points)
                .map_err(|e| MetricsError::Contract(e.to_string()))?;
            if best.map_or(true, |(bd, _)| cd < bd) {
                best = Some((cd, g));
            }
        }
        let Some((_, target)) = best else { continue };
        sum_pred += chamfer(pred_next, &target.points)
            .map_err(|e| MetricsError::Contract(e.to_string()))?;
        sum_zero += chamfer(&record.points, &target.points)
            .map_err(|e| MetricsError::Contract(e.to_string()))?;
        pairs += 1;
    }
    if pairs == 0 {
        return Ok(PredLossReport::default());
    }
    Ok(PredLossReport {
        predicted: sum_pred / pairs as f64,
        zero_offset: sum_zero / pairs as f64,
        pairs,
    })
}
