//! Minimal differentiable numeric core.
//!
//! Dense row-major f64 tensors, a reverse-mode gradient tape over 2-D
//! matrices, a named parameter store with seeded deterministic
//! initialization, a momentum optimizer, and a central-difference gradient
//! checker used as the test oracle for every differentiable path in the
//! crate.

mod check;
mod store;
mod tape;


pub use check::{finite_diff_check, sample_coords, ParamGrads};
pub use store::{Init, ParameterStore, Sgd, CHECKPOINT_HEADER};
pub use tape::{Activation, Reduction, Tape, Var};

use crate::error::TensorError;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Zero the gradient accumulator, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Add `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
