//! Shared error and result types for the toolkit.

use thiserror::Error;

/// Errors reported by volume construction, file I/O, and the numeric
/// operations in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure while reading or writing a file.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A file does not follow the expected on-disk format (bad magic,
    /// unsupported version, malformed JSON, missing schema key).
    #[error("format error: {0}")]
    Format(String),
    /// A file follows the format but its contents are internally
    /// inconsistent (truncated payload, trailing bytes).
    #[error("corrupt file: {0}")]
    Corruption(String),
    /// Arguments violate a documented precondition (mismatched dims,
    /// non-positive spacing, non-finite values, invalid class ids).
    #[error("validation error: {0}")]
    Validation(String),
    /// A scalar argument falls outside its documented range.
    #[error("range error: {0}")]
    Range(String),
    /// An input is too large for an operation with an explicit size guard.
    #[error("size error: {0}")]
    Size(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub(crate) fn size(msg: impl Into<String>) -> Self {
        Error::Size(msg.into())
    }
}
