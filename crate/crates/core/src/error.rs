use thiserror::Error;

/// Errors produced by the embedding, loss, training and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or a dimension is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input that has no meaningful direction or contains non-finite values.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty batch")]
    EmptyBatch,

    /// A loss term needs at least one negative.
    #[error("empty negative set: {0}")]
    EmptyNegativeSet(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    /// A malformed feature or snapshot file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
