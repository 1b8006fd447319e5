use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is singular or rank deficient: {0}")]
    Singular(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("failed to read image {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
