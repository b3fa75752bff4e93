//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor ops, the gradient tape, and parameter handling.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

/// Errors from polyline / pose / raster operations.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Errors from scenario generation and observation.
#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors from the per-frame pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("inconsistent track state: {0}")]
    InconsistentState(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors from the evaluation suite.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("record parse error: {0}")]
    Parse(String),
}
