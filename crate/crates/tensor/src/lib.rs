//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Forward ops run eagerly and are recorded on a [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and returns gradients for the borrowed
//! parameter slice. Every forward op checks its output for non-finite
//! values.

mod adam;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{AttentionMask, Gradients, Tape, Var, MASK_LOGIT};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
