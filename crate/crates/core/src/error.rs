use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the kernels and the file codecs.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates an operation's precondition (even kernel,
    /// threshold out of range, channel mismatch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Spatial shapes do not line up (mask grid vs. feature grid, dims not
    /// divisible by the downsampling factor, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A file could not be decoded. `offset` is the byte offset at which
    /// decoding failed.
    #[error("{}: byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by malformed or unreadable files, as opposed to
    /// well-formed inputs that violate a precondition.
    pub fn is_file_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
