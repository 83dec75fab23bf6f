use thiserror::Error;

use crate::trace::TraceError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stream length mismatch: a has {a} values, b has {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("corrupt scheduled group: {0}")]
    Corrupt(String),
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
