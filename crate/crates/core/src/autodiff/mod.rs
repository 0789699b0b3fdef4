//! Dense `f64` tensors with a per-step reverse-mode tape.

pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, ParamVars, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: channel axis is empty")]
    EmptyChannel(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("state matrix A must be strictly negative")]
    NonNegativeA,
    #[error("tape was created without gradient recording")]
    NotRecording,
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
}
