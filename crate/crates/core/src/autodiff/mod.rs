//! Minimal reverse-mode tensor engine covering exactly the layers the
//! network needs, plus the Adam optimizer and finite-difference checks.

mod adam;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use ops::Padding;
pub use tape::{BatchStats, Branch, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max-pool needs even spatial dims, got {height}x{width}")]
    OddSpatialDims { height: usize, width: usize },
    #[error("backward called without a recorded tape")]
    NoTape,
    #[error("backward needs a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl AutodiffError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::ShapeMismatch(msg.into())
    }
}
