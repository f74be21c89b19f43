use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: axis {axis} expected {expected}, got {actual}")]
    Shape {
        context: String,
        axis: usize,
        expected: usize,
        actual: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {entry} at index {index}")]
    NonFinite { entry: String, index: usize },

    #[error("NaN gradient in parameter {entry}; step aborted")]
    NanGradient { entry: String },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("saved state does not match backward inputs: {0}")]
    SavedStateMismatch(String),

    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, axis: usize, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context: context.into(),
            axis,
            expected,
            actual,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
