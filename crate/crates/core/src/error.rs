use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("channel {requested} not present (file has {available})")]
    ChannelAbsent { requested: usize, available: usize },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),

    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),

    #[error("length difference {diff} samples exceeds alignment tolerance of {tolerance} samples")]
    AlignmentTolerance { diff: usize, tolerance: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("backend {backend} failed for utterance {utt_id}: {message}")]
    Backend {
        backend: String,
        utt_id: String,
        message: String,
    },

    #[error("missing cache entries for {} utterance(s): {}", .0.len(), .0.join(", "))]
    MissingCache(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("utterance {utt_id} failed at stage {stage}: {source}")]
    Stage {
        utt_id: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_stage(self, utt_id: &str, stage: &'static str) -> Self {
        Error::Stage {
            utt_id: utt_id.to_string(),
            stage,
            source: Box::new(self),
        }
    }
}
