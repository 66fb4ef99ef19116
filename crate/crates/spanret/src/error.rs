//! Error type shared by the whole pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {path}")]
    MissingFile { path: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("duplicate doc id: {id}")]
    DuplicateDocId { id: String },

    #[error("{kind} artifact: version mismatch (found v{found}, expected v{expected})")]
    VersionMismatch {
        kind: String,
        found: u32,
        expected: u32,
    },

    #[error("not a valid {expected} artifact: {msg}")]
    BadArtifact { expected: String, msg: String },

    #[error("span store does not match corpus: doc id {doc_id} is unknown")]
    StoreCorpusMismatch { doc_id: String },

    #[error("passage id not found in corpus: {id}")]
    UnknownPassage { id: String },

    #[error("duplicate passage id in retrieval list: {id}")]
    DuplicateHit { id: String },

    #[error("vector dimension mismatch: {msg}")]
    DimensionMismatch { msg: String },

    #[error("model fingerprint mismatch: index was built from {index_fp}, model is {model_fp}")]
    FingerprintMismatch { index_fp: String, model_fp: String },

    #[error("NaN score in batch at query index {index}")]
    NanScore { index: usize },

    #[error("non-finite loss at step {step}{}", checkpoint.as_deref().map(|p| format!("; last good checkpoint: {p}")).unwrap_or_default())]
    NonFiniteLoss {
        step: u64,
        checkpoint: Option<String>,
    },

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("invalid configuration: {msg}")]
    InvalidConfig { msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }
}
