//! Minimal dense-array engine with tape-based reverse-mode differentiation.
//!
//! Only the operations the pipeline needs are provided. Every op records a
//! node on a [`Graph`]; [`Graph::backward`] walks the tape in reverse and
//! returns [`Gradients`] which can be merged into a [`ParamStore`].

mod gemm;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gemm::{gemm, matmul};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{precision, set_precision, Precision, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl KernelError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub(crate) fn invalid(op: &'static str, detail: String) -> Self {
        Self::Invalid { op, detail }
    }
}

pub type KernelResult<T> = Result<T, KernelError>;
