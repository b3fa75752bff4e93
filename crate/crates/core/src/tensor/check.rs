//! Central-difference gradient verification.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParameterStore;
use crate::error::TensorError;

/// Analytic gradients keyed by parameter name, as returned by
/// [`crate::tensor::Tape::param_grads`].
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

/// Compare analytic gradients against central differences.
///
/// `f` evaluates a deterministic scalar of the store and returns it together
/// with its analytic parameter gradients (typically: build a tape, run
/// backward, return `tape.param_grads()`). The check perturbs each listed
/// `(name, flat_index)` coordinate by ±eps and returns the maximum over
/// coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn finite_diff_check<F>(
    store: &ParameterStore,
    coords: &[(String, usize)],
    eps: f64,
    f: F,
) -> Result<f64, TensorError>
where
    F: Fn(&ParameterStore) -> Result<(f64, ParamGrads), TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Config(format!(
            "finite_diff_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (loss0, grads) = f(store)?;
    if !loss0.is_finite() {
        return Err(TensorError::NonFinite("finite_diff_check base evaluation"));
    }
    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    for (name, idx) in coords {
        let original = {
            let t = work.get(name)?;
            if *idx >= t.data.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "finite_diff_check coordinate",
                    lhs: t.shape.clone(),
                    rhs: vec![*idx],
                });
            }
            t.data[*idx]
        };
        work.get_mut(name)?.data[*idx] = original + eps;
        let (plus, _) = f(&work)?;
        work.get_mut(name)?.data[*idx] = original - eps;
        let (minus, _) = f(&work)?;
        work.get_mut(name)?.data[*idx] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_check perturbed evaluation"));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(name).map_or(0.0, |g| g[*idx]);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Deterministically sample up to `per_param` coordinates from every
/// parameter in the store, for gradient checks on larger models.
pub fn sample_coords(store: &ParameterStore, per_param: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let n = t.data.len();
        if n <= per_param {
            out.extend((0..n).map(|i| (name.to_string(), i)));
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_param);
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|i| (name.to_string(), i)));
        }
    }
    out
}
