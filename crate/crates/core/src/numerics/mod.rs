//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck, GradCheckReport, MAX_EPS, REL_ERR_FLOOR};
pub use tape::{gelu_scalar, Gradients, OpKind, ParamId, Precision, Tape, Var, GELU_CUBIC};
pub use tensor::Tensor;

use thiserror::Error;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}
