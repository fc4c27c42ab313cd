use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// configuration/usage problems exit 1, data problems exit 2, numeric
/// failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed container, manifest, or checkpoint contents.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A precondition on data or tensor shapes was violated.
    #[error("{0}")]
    Invalid(String),

    /// Bad configuration or command usage.
    #[error("{0}")]
    Config(String),

    /// Non-finite values or other numeric breakdown.
    #[error("{0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Exit code for the CLI: 0 is success, 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Invalid(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
