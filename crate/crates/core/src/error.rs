use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("matrix is singular or not positive definite")]
    Singular,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero weight matrix, spectral norm estimate is 0")]
    ZeroMatrix,

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: usize, what: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
