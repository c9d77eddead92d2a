use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time {t_us} us outside allowed range [{lo_us}, {hi_us}] us")]
    OutOfRange { t_us: i64, lo_us: i64, hi_us: i64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("tensor `{name}`: {reason}")]
    Weights { name: String, reason: String },

    #[error("scenario mismatch: {0}")]
    Mismatch(String),

    #[error("backward called without a recorded forward pass: {0}")]
    NoGraph(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid user input (configs, schemas), as
    /// opposed to I/O failures or internal shape bugs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Json(_) | Error::Mismatch(_) | Error::Weights { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
