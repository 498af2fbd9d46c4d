use thiserror::Error;

/// Failure classes mirror the CLI exit-code contract: invalid input maps to
/// exit 2, numerical failure to exit 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
