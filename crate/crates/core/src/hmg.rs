//! History-map guidance: refine a track query by attending over the BEV
//! cells its historical mask marks as valid, with positional and class
//! embeddings.

use crate::error::TensorError;
use crate::geometry::RasterMask;
use crate::tensor::{Init, ParameterStore, Tape, Var};
use crate::world::NUM_CLASSES;

/// Fixed sinusoidal embedding over normalized cell coordinates, stored as
/// a [h*w, c] matrix. Frequencies double per group; the base frequency
/// makes the (sin, cos) pair injective over the window, so no two cells
/// share an embedding for c >= 4.
#[derive(Debug, Clone)]
pub struct PositionEmbeddingGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl PositionEmbeddingGrid {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        let quarter = c / 4;
        let mut data = vec![0.0; h * w * c];
        for row in 0..h {
            for col in 0..w {
                let x = (col as f64 + 0.5) / w as f64;
                let y = (row as f64 + 0.5) / h as f64;
                let base = (row * w + col) * c;
                for d in 0..quarter {
                    let omega = std::f64::consts::PI * (1 << d) as f64;
                    data[base + 4 * d] = (omega * x).sin();
                    data[base + 4 * d + 1] = (omega * x).cos();
                    data[base + 4 * d + 2] = (omega * y).sin();
                    data[base + 4 * d + 3] = (omega * y).cos();
                }
            }
        }
        Self { h, w, c, data }
    }
}

/// Parameter namespace for the guidance cross-attention. The output
/// projection starts at zero so an untrained module refines queries by
/// the identity.
#[derive(Debug, Clone)]
pub struct HmgNet {
    pub c: usize,
    pub theta: f64,
    pub k_max: usize,
}

impl HmgNet {
    pub fn register(store: &mut ParameterStore, c: usize, theta: f64, k_max: usize) -> Self {
        let fan = Init::UniformFanIn { fan_in: c };
        store.ensure("hmg.class_embed", &[NUM_CLASSES, c], fan);
        for name in ["wq", "wk", "wv"] {
            store.ensure(&format!("hmg.{name}"), &[c, c], fan);
            store.ensure(&format!("hmg.b{}", &name[1..]), &[c], Init::Zeros);
        }
        store.ensure("hmg.wo", &[c, c], Init::Zeros);
        store.ensure("hmg.bo", &[c], Init::Zeros);
        Self { c, theta, k_max }
    }

    /// Refine one track query against its sampled guidance features.
    /// `sampled` of `None` (no valid history cells) returns the query
    /// unchanged.
    pub fn refine_query(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        q_track: Var,
        class_id: usize,
        sampled: Option<Var>,
    ) -> Result<Var, TensorError> {
        let Some(sampled) = sampled else {
            return Ok(q_track);
        };
        if class_id >= NUM_CLASSES {
            return Err(TensorError::Config(format!(
                "class id {class_id} out of range"
            )));
        }
        let ce_table = tape.param(store, "hmg.class_embed")?;
        let ce = tape.gather_rows(ce_table, &[class_id])?;
        let qc = tape.add(q_track, ce)?;
        let wq = tape.param(store, "hmg.wq")?;
        let bq = tape.param(store, "hmg.bq")?;
        let wk = tape.param(store, "hmg.wk")?;
        let bk = tape.param(store, "hmg.bk")?;
        let wv = tape.param(store, "hmg.wv")?;
        let bv = tape.param(store, "hmg.bv")?;
        let qp = tape.linear(qc, wq, bq)?;
        let k = tape.linear(sampled, wk, bk)?;
        let v = tape.linear(sampled, wv, bv)?;
        let attn = tape.masked_attention(qp, k, v, None)?;
        let wo = tape.param(store, "hmg.wo")?;
        let bo = tape.param(store, "hmg.bo")?;
        let out = tape.linear(attn, wo, bo)?;
        tape.add(q_track, out)
    }
}

/// Binary validity grid: 1 where the memory mask strictly exceeds theta.
pub fn valid_mask(mask: &RasterMask, theta: f64) -> Result<Vec<f64>, TensorError> {
    if !(0.0 < theta && theta < 1.0) {
        return Err(TensorError::Config(format!(
            "validity threshold {theta} outside (0,1)"
        )));
    }
    Ok(mask
        .grid
        .iter()
        .map(|v| if *v > theta { 1.0 } else { 0.0 })
        .collect())
}

/// Indices of valid cells in row-major order, capped at `k_max` by keeping
/// the highest memory values (ties to the lower index).
pub fn guided_cell_indices(valid: &[f64], memory_values: &[f64], k_max: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = valid
        .iter()
        .enumerate()
        .filter_map(|(i, v)| (*v != 0.0).then_some(i))
        .collect();
    if idx.len() > k_max {
        idx.sort_by(|a, b| {
            memory_values[*b]
                .partial_cmp(&memory_values[*a])
                .expect("finite memory values")
                .then(a.cmp(b))
        });
        idx.truncate(k_max);
        idx.sort_unstable();
    }
    idx
}

/// Gather the valid cells' rows of the positional-enriched feature matrix
/// `f_kv` ([cells, c]). Returns `None` when no cell is valid.
pub fn sample_guided_features(
    tape: &mut Tape,
    f_kv: Var,
    valid: &[f64],
    memory_values: &[f64],
    k_max: usize,
) -> Result<Option<Var>, TensorError> {
    let (cells, _) = tape.shape(f_kv);
    if valid.len() != cells || memory_values.len() != cells {
        return Err(TensorError::ShapeMismatch {
            op: "sample_guided_features",
            lhs: vec![cells],
            rhs: vec![valid.len(), memory_values.len()],
        });
    }
    let idx = guided_cell_indices(valid, memory_values, k_max);
    if idx.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.gather_rows(f_kv, &idx)?))
}
