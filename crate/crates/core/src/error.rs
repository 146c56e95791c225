use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// Inconsistent experiment configuration (missing reference, vocab mismatch, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file parsed but its content does not follow the expected format.
    #[error("{path}: line {line}: field `{field}`: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    /// Unsupported on-disk format version.
    #[error("{path}: unsupported format_version {found} (expected {expected})")]
    Version { path: PathBuf, found: u64, expected: u64 },

    /// A loss or gradient became non-finite during training or evaluation.
    #[error("non-finite {quantity} at pair {pair}")]
    NonFinite { quantity: &'static str, pair: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Config(_) | Error::Format { .. } | Error::Version { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
