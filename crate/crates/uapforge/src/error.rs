//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the attack/evaluation pipeline.
#[derive(Debug, Error)]
pub enum UapError {
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("corrupt image '{path}': {msg}")]
    CorruptImage { path: String, msg: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    #[error("budget invariant violated: {0}")]
    Budget(String),

    #[error("non-finite loss at step {step}: {msg}")]
    NonFinite { step: usize, msg: String },

    #[error("no eligible sentences for candidate '{0}'")]
    NoEligibleSentences(String),

    #[error("unknown adapter '{0}'")]
    UnknownAdapter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UapError>;

impl UapError {
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        UapError::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
