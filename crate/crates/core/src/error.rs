use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the process exit codes used by the CLI: validation
/// errors exit 2, numerical failures exit 3, and IO failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or input data (bad geometry, aliased pattern,
    /// wrong frame count, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Numerical failure (singular matrix, undetectable modulation,
    /// no foreground, non-finite data, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// File-format or filesystem failure.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
