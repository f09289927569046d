//! Minimal differentiable-computation core: dense matrices, a reverse-mode
//! tape, layer helpers, named parameter storage, optimizers and checkpoints.

mod checkpoint;
mod layers;
mod matrix;
mod optim;
mod params;
mod tape;
#[cfg(test)]
pub(crate) mod testutil;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Record, CHECKPOINT_VERSION};
pub use layers::{cross_entropy, dense, gcn_layer, lstm_step, LstmVars};
pub use matrix::Matrix;
pub use optim::{apply_gradients, OptimConfig, OptimizerKind, SharedParams};
pub use params::{Gradients, Param, ParameterSet, Tensor};
pub use tape::{softmax_values, Grads, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("softmax mask has no unmasked entry")]
    EmptyMask,
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
