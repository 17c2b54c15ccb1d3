use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid scaling regime: {0}")]
    InvalidRegime(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("non-finite value {what} at {location}")]
    NonFinite { what: String, location: String },
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("trade {index} infeasible: requested {requested} shares, book holds {available}")]
    InfeasibleTrade { index: usize, requested: f64, available: f64 },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("insufficient sample: need at least {needed}, got {got}")]
    InsufficientSample { needed: usize, got: usize },
    #[error("path aborted: {0}")]
    PathAborted(String),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
