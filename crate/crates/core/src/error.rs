//! Error type shared by every module of the crate.

use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// SVG input outside the supported subset, or malformed XML.
    #[error("svg parse error (line {line}): {message}")]
    Svg { line: usize, message: String },

    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown attachment key `{0}`")]
    UnknownAttachment(String),

    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),

    #[error("adapter role violation: {0}")]
    Role(String),

    /// Binary artifact with a bad magic string, version or truncated payload.
    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn svg(line: usize, message: impl Into<String>) -> Self {
        Error::Svg {
            line,
            message: message.into(),
        }
    }
}
