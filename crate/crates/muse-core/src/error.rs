//! Crate-wide error type.

/// Errors surfaced by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum MuseError {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value appeared where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Stored or derived artifacts disagree with each other.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Input data is malformed (bad token id, ragged corpus, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MuseError>;
