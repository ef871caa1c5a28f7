use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no attendable position: every key is masked")]
    AllMasked,

    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { token: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("missing back-translated source for a sampled draw above the threshold")]
    MissingBackTranslation,

    #[error("missing translate-test source")]
    MissingTranslateTest,

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
