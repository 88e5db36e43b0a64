//! Minimal tensors with reverse-mode differentiation, the layer kinds the
//! autoencoders need, mean-squared-error loss and Adam.

mod adam;
pub mod conv;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::AdamState;
pub use conv::{ConvGeometry, Padding};
pub use scalar::Scalar;
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var, BN_EPS};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unreachable target shape: {0}")]
    UnreachableTargetShape(String),
    #[error("batch normalization needs at least 2 rows in training mode, got {0}")]
    BatchTooSmall(usize),
}
