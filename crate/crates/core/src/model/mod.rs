//! The dense and convolutional autoencoders, their training step and
//! reconstruction error, and the checkpoint file format.

mod arch;
pub mod checkpoint;
mod network;

use thiserror::Error;

use crate::autograd::TensorError;
use crate::features::FeatureKind;

pub use arch::{Architecture, ConvAeSpec, ConvLayerSpec, DenseAeSpec, ModelFamily};
pub use checkpoint::{CheckpointMeta, ModelCheckpoint};
pub use network::{
    build, build_conv_ae, build_dense_ae, reconstruction_error, BnBufferIndex, Layer, Network,
    StepOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature kind {got:?} cannot feed a {expected} model")]
    KindMismatch { expected: ModelFamily, got: FeatureKind },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
