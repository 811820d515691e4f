//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural misconfiguration: dimension mismatches, invalid specs,
    /// missing components required by an agent variant.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: empty buffers, out-of-range arguments, frozen-buffer
    /// writes.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed demonstration, checkpoint, or report files.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
