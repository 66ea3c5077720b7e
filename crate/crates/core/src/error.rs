use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch-norm fusion failed at layer {layer}, channel {channel}: zero variance with gamma = {gamma}")]
    Fusion { layer: usize, channel: usize, gamma: f64 },

    #[error("training diverged at epoch {epoch}: loss is {loss} (learning rate too high or data not normalized?)")]
    Diverged { epoch: usize, loss: f64 },

    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint {path} has version {found}, this build reads version {expected}")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("stage T={timesteps} is not trainable: {reason}")]
    Untrainable { timesteps: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
