use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("truncated or malformed WAV header: {0}")]
    TruncatedHeader(String),
    #[error("unsupported WAV content: {0}")]
    UnsupportedFormat(String),
    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("signal too short: {len} samples, need at least {need}")]
    SignalTooShort { len: usize, need: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (utterances: {ids:?})")]
    NonFiniteLoss { step: u64, ids: Vec<String> },
    #[error("forward cache is stale; parameters changed since the forward pass")]
    StaleCache,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True when the error stems from bad input (arguments, files, configs)
    /// rather than from a failure inside the pipeline.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Shape(_) | Error::NonFiniteLoss { .. } | Error::StaleCache | Error::Io(_)
        )
    }
}
