use thiserror::Error;

use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("image format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("training diverged at step {step}: loss {loss} stayed above {limit} for {window} steps")]
    Diverged {
        step: usize,
        loss: f32,
        limit: f32,
        window: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration problems (as opposed to failures while running).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_) | Error::Text(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
