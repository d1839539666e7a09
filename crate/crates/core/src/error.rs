use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    /// A NaN or infinity showed up somewhere it must not.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint load error at byte offset {offset}: {msg}")]
    Load { offset: usize, msg: String },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit status for this failure: 3 for numeric failures, 2 for
    /// everything else (bad data, bad configuration, I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
