//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FissError>;

#[derive(Debug, Error)]
pub enum FissError {
    /// Invalid configuration or argument. `key` is a dotted path when the
    /// value came from a config document.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    /// A federated-protocol precondition was violated (e.g. no old model
    /// available where one is required).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FissError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FissError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        FissError::Shape(message.into())
    }
}
