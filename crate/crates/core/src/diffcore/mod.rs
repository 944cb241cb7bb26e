//! Minimal reverse-mode autodiff over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive op of one forward pass; [`Tape::backward`]
//! walks the record once in reverse and returns gradients for all trainable
//! leaves. Tapes are rebuilt per forward pass, live on one thread, and support
//! exactly the ops the model and losses in this crate need: matmul,
//! elementwise arithmetic with scalar broadcast, concat/slice on the last
//! axis, full reductions, and a small set of pointwise nonlinearities.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised while recording or differentiating.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("slice [{start}, {start}+{len}) out of bounds for last axis of {shape:?}")]
    InvalidSlice {
        shape: Vec<usize>,
        start: usize,
        len: usize,
    },
    #[error("{op}: domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("expected a scalar tensor, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("operands were recorded on different tapes")]
    TapeMismatch,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Self {
        DiffError::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }
}
