use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty training corpus")]
    EmptyCorpus,

    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch { source_lines: usize, target_lines: usize },

    #[error("{path}: line {line}: invalid UTF-8")]
    InvalidUtf8 { path: PathBuf, line: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid vocabulary file: {0}")]
    InvalidVocabulary(String),

    #[error("need at least {needed} items to split, got {got}")]
    SplitTooSmall { needed: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("attention over empty set")]
    EmptyAttention,

    #[error("empty source sentence")]
    EmptySource,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimizer step counter must be positive, got {0}")]
    InvalidStep(u64),

    #[error("non-finite loss in batch {batch}: {loss}")]
    NonFiniteLoss { batch: usize, loss: f64 },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Metric(String),

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
