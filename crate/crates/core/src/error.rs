//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, estimation, and the solvers.
#[derive(Debug, Error)]
pub enum DcrlError {
    /// Caller passed an argument that violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model failed its construction-time validation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A numerical routine failed in a way that should be impossible on
    /// valid input (e.g. a singular discounted fixed-point system).
    #[error("internal numerical error: {0}")]
    Numerical(String),

    /// File or parse failure in one of the text formats.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DcrlError {
    fn from(e: std::io::Error) -> Self {
        DcrlError::Io(e.to_string())
    }
}

impl DcrlError {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        DcrlError::InvalidArgument(msg.into())
    }

    pub fn invalid_model(msg: impl Into<String>) -> Self {
        DcrlError::InvalidModel(msg.into())
    }
}
