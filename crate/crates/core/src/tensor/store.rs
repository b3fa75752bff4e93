//! Named parameter storage, seeded initialization, checkpoints, optimizer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::TensorError;

/// First line of every checkpoint file.
pub const CHECKPOINT_HEADER: &str = "bevmap-checkpoint v1";

/// Initialization scheme for a parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) from the per-name stream.
    UniformFanIn { fan_in: usize },
    Zeros,
    Const(f64),
    /// For a [rows, cols] weight: identity in the top square block, zeros
    /// below. Used so concat-and-project fusions start as pass-through.
    BlockIdentity,
}

/// Named map from parameter path to tensor.
///
/// Iteration order is always sorted by name, and each parameter draws its
/// initial values from an RNG stream derived from (seed, name), so
/// re-creating the same parameters in any order reproduces bit-identical
/// values.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create the parameter if absent; existing entries are left untouched.
    pub fn ensure(&mut self, name: &str, shape: &[usize], init: Init) {
        if self.params.contains_key(name) {
            return;
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::UniformFanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::BlockIdentity => {
                assert_eq!(shape.len(), 2, "BlockIdentity needs a 2-D shape");
                let (rows, cols) = (shape[0], shape[1]);
                let mut data = vec![0.0; numel];
                for i in 0..rows.min(cols) {
                    data[i * cols + i] = 1.0;
                }
                data
            }
        };
        let mut t = Tensor::new(shape.to_vec(), data).expect("init shape/data agree");
        t.requires_grad = true;
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<(), TensorError> {
        let t = self.get_mut(name)?;
        if t.data.len() != g.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: t.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        t.accumulate_grad(g);
        Ok(())
    }

    /// Serialize to the versioned textual checkpoint format.
    ///
    /// Line 1 is [`CHECKPOINT_HEADER`], line 2 the RNG seed. Each parameter
    /// then occupies two lines: `param <name> <ndim> <dims...>` followed by
    /// the row-major values separated by single spaces. Floats are written
    /// in shortest round-trip form, so load-then-save reproduces the file
    /// byte for byte.
    pub fn to_checkpoint_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "seed {}", self.seed);
        for (name, t) in &self.params {
            let _ = write!(out, "param {} {}", name, t.shape.len());
            for d in &t.shape {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let mut first = true;
            for v in &t.data {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint_text(text: &str) -> Result<Self, TensorError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TensorError::Checkpoint("empty file".into()))?;
        if header != CHECKPOINT_HEADER {
            return Err(TensorError::Checkpoint(format!(
                "bad header '{header}', expected '{CHECKPOINT_HEADER}'"
            )));
        }
        let seed_line = lines
            .next()
            .ok_or_else(|| TensorError::Checkpoint("missing seed line".into()))?;
        let seed = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| TensorError::Checkpoint(format!("bad seed line '{seed_line}'")))?;
        let mut store = ParameterStore::new(seed);
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            if parts.next() != Some("param") {
                return Err(TensorError::Checkpoint(format!("bad param line '{line}'")));
            }
            let name = parts
                .next()
                .ok_or_else(|| TensorError::Checkpoint("missing name".into()))?;
            let ndim: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TensorError::Checkpoint("missing ndim".into()))?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| TensorError::Checkpoint("missing dim".into()))?;
                shape.push(d);
            }
            let value_line = lines
                .next()
                .ok_or_else(|| TensorError::Checkpoint(format!("missing values for '{name}'")))?;
            let data: Result<Vec<f64>, _> = value_line
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(str::parse::<f64>)
                .collect();
            let data =
                data.map_err(|e| TensorError::Checkpoint(format!("bad value in '{name}': {e}")))?;
            let mut t = Tensor::new(shape, data).map_err(|_| {
                TensorError::Checkpoint(format!("shape/value count mismatch in '{name}'"))
            })?;
            t.requires_grad = true;
            store.params.insert(name.to_string(), t);
        }
        Ok(store)
    }
}

/// Gradient descent with momentum. The one optimizer in the crate.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update from the grads currently accumulated in `store`,
    /// then zero them. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParameterStore) {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let t = store.get_mut(&name).expect("name from iteration");
            let Some(grad) = t.grad.as_ref() else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, v), g) in t.data.iter_mut().zip(vel.iter_mut()).zip(grad.iter()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        store.zero_grads();
    }
}
