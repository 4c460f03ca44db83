use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid token {0:?}: surface must be non-empty and contain no whitespace")]
    InvalidToken(String),

    #[error("duplicate token {0:?}")]
    DuplicateToken(String),

    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty similar set")]
    EmptySimilarSet,

    #[error("non-trainable generator")]
    NonTrainable,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },

    #[error("target id {id} out of vocabulary of size {size}")]
    TargetOutOfVocab { id: usize, size: usize },

    #[error("empty span")]
    EmptySpan,

    #[error("word count mismatch: {left} vs {right}")]
    WordCountMismatch { left: usize, right: usize },

    #[error("loss diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("vocabulary mismatch between initializations: {0}")]
    VocabMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
