use thiserror::Error;

use crate::story::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid story: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("parse error at byte {offset}: expected {expected}, {found}")]
    Parse { offset: usize, expected: String, found: String },

    #[error("unknown domain token `{span}` at byte {offset}")]
    UnknownDomainToken { span: String, offset: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at batch {batch}")]
    NonFiniteLoss { batch: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Parse { offset, expected: expected.into(), found: found.into() }
    }

    /// Stable machine-readable error class, used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::UnknownDomainToken { .. } => "unknown-token",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
