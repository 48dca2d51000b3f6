use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown word {0:?}")]
    OutOfVocabulary(String),
    #[error("coordinate {0} outside the encodable range")]
    CoordinateRange(f64),
    #[error("token id {id} outside {range}")]
    TokenRange { id: usize, range: &'static str },
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing {artifact}; run `{hint}` first")]
    Missing { artifact: PathBuf, hint: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at step {step} of {stage}")]
    NonFiniteLoss { stage: String, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
