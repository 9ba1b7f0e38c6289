use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QdcError {
    /// Invalid parameters, unknown ids, or inconsistent inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed record in a line-oriented input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An internal bookkeeping invariant was violated. Always a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    /// The simulation could not make progress even after every retry.
    #[error("unresolvable stall at t = {time_ms} ms\n{diagnostic}")]
    Stall { time_ms: f64, diagnostic: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QdcError {
    fn from(e: std::io::Error) -> Self {
        QdcError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QdcError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(QdcError::Config(msg.into()))
}

pub(crate) fn invariant<T>(msg: impl Into<String>) -> Result<T> {
    Err(QdcError::Invariant(msg.into()))
}
