//! Error type shared across the engine.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and a parameter set) disagree on shape.
    #[error("{context}: shape mismatch: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    /// A shape is malformed on its own (zero extent, bad rank, length mismatch).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A scalar argument is out of its documented domain.
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents cannot be decoded.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Weights container violation: checksum, missing entry, bad layout.
    #[error("weights: {0}")]
    Weights(String),
}

impl Error {
    pub(crate) fn shape_mismatch(
        context: impl Into<String>,
        left: impl std::fmt::Debug,
        right: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
