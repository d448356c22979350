use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reader pipeline.
#[derive(Debug, Error)]
pub enum DgrError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in sample {sample}: {reason}")]
    Parse { sample: usize, reason: String },

    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DgrError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DgrError::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        DgrError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DgrError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DgrError::Config { .. } | DgrError::Io { .. } => 1,
            DgrError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = DgrError> = std::result::Result<T, E>;
