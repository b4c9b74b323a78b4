//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients into a [`ParamStore`].

mod float;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use float::Float;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{KeyMask, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("softmax row {row} has every key masked")]
    FullyMasked { row: usize },
    #[error("{op} produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },
    #[error("backward called on a tensor that does not depend on any parameter")]
    Detached,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
