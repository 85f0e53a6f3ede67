use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside the domain of an operation (log of a non-positive
    /// number, empty reduction, too few samples).
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse, e.g. differentiating a tensor that is not on a tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid hyperparameters or configuration keys.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file (checkpoint, IDX).
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// Malformed text input.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    /// A loss term became NaN or infinite.
    #[error("training diverged at step {step}: `{term}` is {value}")]
    Divergence { step: u64, term: String, value: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
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
}
