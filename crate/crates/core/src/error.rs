use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite decoder hidden state at step {step}")]
    NonFiniteState { step: usize },

    #[error("empty attention trace")]
    EmptyTrace,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frame count {frames} does not match duration sum {sum}")]
    FrameMismatch { frames: usize, sum: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("utterance {utterance}: {reason}")]
    Corpus { utterance: String, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }
}
