use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FcfError {
    #[error("non-finite value in {what} (batch index {batch})")]
    NonFinite { what: &'static str, batch: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),

    #[error(
        "mask ratio bounds [{lo}, {hi}] not reached after {tries} attempts; \
         achieved-ratio histogram (10 bins over [0,1]): {histogram:?}"
    )]
    UnreachableRatio {
        lo: f64,
        hi: f64,
        tries: usize,
        histogram: [usize; 10],
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown layer selector `{selector}`; available sites: {available:?}")]
    UnknownSelector {
        selector: String,
        available: Vec<String>,
    },

    #[error("embedder mismatch: `{left}` vs `{right}`")]
    EmbedderMismatch { left: String, right: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FcfError {
    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Field-level configuration problems.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("`{key}`: cannot parse `{value}`: {reason}")]
    Parse {
        key: String,
        value: String,
        reason: String,
    },

    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },

    #[error("line {line}: expected `section.key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
}

impl ConfigError {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// Fully qualified key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey { key, .. } | Self::Parse { key, .. } | Self::Invalid { key, .. } => {
                Some(key)
            }
            Self::Syntax { .. } => None,
        }
    }
}

pub type Result<T, E = FcfError> = std::result::Result<T, E>;
