//! Error type shared across the engine.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, unknown policy, empty inputs).
    #[error("configuration error: {0}")]
    Config(String),

    /// Cache shape or bookkeeping mismatch.
    #[error("cache error: {0}")]
    Cache(String),

    /// A sequencing contract was violated (missing logits, empty mask set).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite values where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Two sequences could not be compared.
    #[error("comparison error: {0}")]
    Comparison(String),

    /// Malformed persisted data; `location` names the byte offset or line.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse_at_offset(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse { location: format!("offset {offset}"), message: msg.into() }
    }

    pub(crate) fn parse_at_line(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { location: format!("line {line}"), message: msg.into() }
    }
}
