use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("incompatible resampling factor: {0}")]
    IncompatibleFactor(String),
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the CLI for this class of error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::InvalidState(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
