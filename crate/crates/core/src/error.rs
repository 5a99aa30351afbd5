use std::fmt;

use thiserror::Error;

use crate::meter::OpKind;

/// Failures raised by the slot-vector primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LheError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("slot length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("key mismatch: expected key {expected:#018x}, got {actual:#018x}")]
    KeyMismatch { expected: u64, actual: u64 },
    #[error("level exhausted: {op} at level {level}{}", ScopeSuffix(.scope))]
    LevelExhausted { op: OpKind, level: u32, scope: Option<String> },
    #[error("malformed ciphertext encoding: {0}")]
    Decode(String),
}

struct ScopeSuffix<'a>(&'a Option<String>);

impl fmt::Display for ScopeSuffix<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(s) => write!(f, " in scope {s}"),
            None => Ok(()),
        }
    }
}

/// Top-level error for every layer above the primitives.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lhe(#[from] LheError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layout mismatch: expected {expected}, got {actual}")]
    Layout { expected: String, actual: String },
    #[error("tee: {0}")]
    Tee(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn is_level_exhausted(&self) -> bool {
        matches!(self, Error::Lhe(LheError::LevelExhausted { .. }))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
