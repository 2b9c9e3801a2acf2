//! A small deterministic neural-network engine: the layer set needed by the
//! pose regressor, reverse-mode gradients, Adam and early stopping.

mod checkpoint;
pub mod layers;
mod model;
mod optim;
mod tensor;
mod train;

use std::path::PathBuf;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Activation, Shape};
pub use model::{LayerSpec, Layer, Mode, Model, Param, Regularization, DEFAULT_BN_MOMENTUM};
pub use optim::{weighted_mse, weighted_mse_grad, Adam, AdamConfig, EarlyStopping, Verdict};
pub use tensor::Tensor;
pub use train::{train, train_with_progress, History, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): expected input {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        expected: String,
        got: String,
    },
    #[error("layer {layer} ({kind}) cannot be built: {reason}")]
    Infeasible {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("backward called without a recorded training-mode forward pass")]
    NoForwardPass,
    #[error("parameter state does not match the layer chain")]
    StateMismatch,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
