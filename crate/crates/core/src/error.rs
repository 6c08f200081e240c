//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (range, shape, emptiness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A requested conformal rank exceeds the available sample size.
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    /// A file could not be parsed (IDX magic, CSV arity, columnar header).
    #[error("parse error: {0}")]
    Parse(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}
