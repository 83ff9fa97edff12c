//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A forward pass records every operation on a [`Tape`] that borrows the
//! model's [`ParamStore`]. [`Tape::backward`] then walks the record in
//! reverse, visiting each node once, and returns [`Gradients`] keyed by
//! [`ParamId`]. Only the operations a Transformer encoder-decoder needs are
//! provided; broadcasting is limited to tiling a trailing-suffix operand
//! in [`Tape::add`].

mod checkpoint;
pub mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use scalar::Scalar;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {count}", .shape.iter().product::<usize>())]
    ValueCount { shape: Vec<usize>, count: usize },
    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("cross-entropy target has no non-padding positions")]
    EmptyTarget,
    #[error("backward requires a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
