use thiserror::Error;

/// Errors produced by the testing engine and its components.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in test state at index {0}")]
    NonFinite(usize),

    #[error("dataset contains a single class; cannot rebalance")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
