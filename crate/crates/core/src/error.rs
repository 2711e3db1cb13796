use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Misuse of an API contract (tape, hooks, empty inputs, bad ranges).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence overflow: {needed} positions requested, max_seq is {max_seq}")]
    SequenceOverflow { needed: usize, max_seq: usize },

    #[error("vocabulary mismatch: draft has {draft}, target has {target}")]
    VocabMismatch { draft: usize, target: usize },

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint shape mismatch for `{path}`: {detail}")]
    CheckpointShape { path: String, detail: String },

    #[error("truncated checkpoint blob for `{path}`: need {needed} bytes, have {available}")]
    TruncatedBlob {
        path: String,
        needed: usize,
        available: usize,
    },

    #[error("dataset format error at line {line}: {detail}")]
    Dataset { line: usize, detail: String },

    #[error("missing artifact {path} (run the `{stage}` stage first)")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Whether this error stems from bad input or configuration rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_)
                | Error::Config(_)
                | Error::MissingArtifact { .. }
                | Error::TokenOutOfRange { .. }
                | Error::VocabMismatch { .. }
        )
    }
}
