//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration struct violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was invoked in a state that cannot support it
    /// (e.g. backward through a tensor that is not on the tape).
    #[error("state error: {0}")]
    State(String),

    /// A numeric computation failed (singular system, lost positive
    /// definiteness, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A value became non-finite at a known point of an integration or
    /// training trajectory.
    #[error("non-finite value at t={t}: {reason}")]
    NonFinite { t: f64, reason: String },

    /// A persisted file is malformed; `offset` is the byte position at
    /// which decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
