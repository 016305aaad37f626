use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum AcmError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("load error at {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, AcmError>;

impl AcmError {
    pub fn parameter(msg: impl Into<String>) -> Self {
        AcmError::Parameter(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        AcmError::Domain(msg.into())
    }
}
