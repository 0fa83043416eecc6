use thiserror::Error;

/// Errors produced anywhere in the compensation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numeric failure in {matrix}: {reason}")]
    Numeric { matrix: String, reason: String },

    #[error("protocol error at window {window} (generation {generation}): {reason}")]
    Protocol {
        window: String,
        generation: u64,
        reason: String,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
