use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of an operation (e.g. a timestep past the schedule end).
    #[error("domain error: {0}")]
    Domain(String),
    /// Operands whose shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A violated precondition other than shape.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
