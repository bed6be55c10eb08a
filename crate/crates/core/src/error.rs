use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: invalid instruction: {}", format_violations(.violations))]
    InvalidInstruction {
        line: usize,
        violations: Vec<Violation>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("instruction {id}: {len} sub-word units exceed the limit of {max}")]
    TooLong { id: String, len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no valid positions in span distribution")]
    AllMasked,

    #[error("checkpoint mismatch: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("length mismatch: {predictions} predictions vs {golds} golds")]
    LengthMismatch { predictions: usize, golds: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
