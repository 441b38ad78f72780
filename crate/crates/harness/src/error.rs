use std::path::PathBuf;

use bilevel_core::optimizers::RunError;
use bilevel_core::BilevelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// A malformed or inconsistent configuration; `key` names the culprit.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run `{label}` diverged: {source}")]
    Divergence {
        label: String,
        #[source]
        source: RunError,
    },
    #[error("run `{label}` failed: {source}")]
    Run {
        label: String,
        #[source]
        source: RunError,
    },
    #[error(transparent)]
    Core(#[from] BilevelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for divergence,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
