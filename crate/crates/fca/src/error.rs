//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An attention mask left a query row with no allowed key.
    #[error("invalid mask: {0}")]
    Mask(String),

    /// Bad run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A word outside the closed vocabulary, or a prompt that cannot fit.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// An operation was called outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or truncated tensor container / manifest.
    #[error("container error: {0}")]
    Container(String),

    /// Training diverged (non-finite loss or gradient).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
