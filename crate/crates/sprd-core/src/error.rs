//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SprError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    #[error("{op}: {msg}")]
    BadArg { op: &'static str, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SprError>;

impl SprError {
    pub fn bad_arg(op: &'static str, msg: impl Into<String>) -> Self {
        SprError::BadArg { op, msg: msg.into() }
    }
}
