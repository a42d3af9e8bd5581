use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the audit pipeline.
///
/// Variants map onto the failure classes each stage can report; the CLI
/// turns all of them into a validation exit status except where a batch
/// keeps going past per-pair failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error for case `{case_id}`: {reason}")]
    Ingestion { case_id: String, reason: String },

    #[error("ingestion error at {path}: {reason}")]
    Roster { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("contamination error: test-split case `{0}` cannot enter the precedent index")]
    Contamination(String),

    #[error("prompt assembly error: {0}")]
    Assembly(String),

    #[error("backend error for pair ({image_id}, {case_id}): {reason}")]
    Backend {
        image_id: String,
        case_id: String,
        reason: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("lexicon expansion error: {0}")]
    Expansion(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
