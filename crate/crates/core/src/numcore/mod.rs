//! Dense tensors, a reverse-mode tape and a finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_multi, GradCheckReport};
pub use tape::{Gradients, Sign, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index out of range for extent {extent}: {indices:?}")]
    IndexOutOfRange {
        op: &'static str,
        extent: usize,
        indices: Vec<usize>,
    },
    #[error("log of non-positive value {value}")]
    NonPositiveLog { value: f64 },
    #[error("{op}: non-finite value {value}")]
    NonFinite { op: &'static str, value: f64 },
    #[error("backward needs a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this forward pass")]
    BackwardTwice,
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid gradient-check parameter: {0}")]
    BadCheckParam(&'static str),
}
