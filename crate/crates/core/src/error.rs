use std::path::PathBuf;

use fsn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),
    #[error("class {0} has no concept in the vocabulary")]
    MissingConcept(u8),
    #[error("prompt needs {needed} tokens but the sequence length is {max}")]
    PromptOverflow { needed: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the failure is a non-finite loss or gradient.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::Divergence(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
