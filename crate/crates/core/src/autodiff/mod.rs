//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation records its inputs
//! and output value; [`Graph::backward`] walks the tape in reverse once.
//! Tensors are rank 0, 1 or 2 and there is no broadcasting beyond scalars and
//! per-row (per-feature) affine terms.

mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use graph::{Conv1d, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
