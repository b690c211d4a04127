use std::path::PathBuf;

use crate::api::{FieldError, Mode};
use crate::rerank::ScoredHit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("corpus contained no chunkable documents")]
    EmptyCorpus,

    #[error("malformed input record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("id {id} not found (size {size})")]
    NotFound { id: u64, size: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("encoder produced a zero vector for text {text:?}")]
    ZeroVector { text: String },

    #[error("remote encoder {endpoint} failed after {attempts} attempt(s): {message}")]
    RemoteEncoder {
        endpoint: String,
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("id {0} already present in index")]
    DuplicateId(u64),

    #[error("build would need {needed} bytes, limit is {limit}")]
    BuildResource { needed: u64, limit: u64 },

    #[error("corrupt index {path}: {reason}")]
    CorruptIndex { path: PathBuf, reason: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{artifact} artifact: {source}")]
    Artifact {
        artifact: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("mode {0} is unavailable: no index loaded for it")]
    ModeUnavailable(Mode),

    #[error("invalid request: {}", summarize(.0))]
    InvalidRequest(Vec<FieldError>),

    #[error("rerank unavailable: {reason}")]
    RerankUnavailable {
        reason: String,
        fallback: Vec<ScoredHit>,
    },
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Tags an error with the startup artifact it came from.
    pub fn artifact(artifact: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Artifact {
            artifact,
            source: Box::new(e),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
        Error::CorruptIndex {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
