use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("degenerate input in {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("value out of range in {op}: {reason}")]
    OutOfRange { op: &'static str, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn range(op: &'static str, reason: impl Into<String>) -> Self {
        Error::OutOfRange {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
