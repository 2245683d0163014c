//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, out-of-range constants, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A vector or matrix did not have the expected shape.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A rollout or chain produced a non-finite value. Carries a diagnostic
    /// dump of the offending state.
    #[error("non-finite value in {context} at iteration {iteration}: {dump}")]
    NonFinite {
        context: &'static str,
        iteration: usize,
        dump: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
