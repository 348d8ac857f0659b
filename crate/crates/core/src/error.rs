use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("scene leakage between splits: {0}")]
    Leakage(String),
    #[error("inconsistent render styles: {0}")]
    Consistency(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
