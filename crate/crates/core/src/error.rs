use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} positions exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence {0} in the batch has no tokens")]
    EmptySequence(usize),
    #[error("adapter does not match the base model: {0}")]
    AdapterMismatch(String),
    #[error("variant {variant} needs a {slot} adapter")]
    MissingAdapter {
        variant: &'static str,
        slot: &'static str,
    },
    #[error("variant {variant} takes no {slot} adapter")]
    UnexpectedAdapter {
        variant: &'static str,
        slot: &'static str,
    },
    #[error("only LoRA adapters can be merged into base weights, got {0}")]
    NotMergeable(&'static str),
    #[error("projection {0} is not targeted by this adapter")]
    UntargetedProjection(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("training error: {0}")]
    Training(String),
    #[error("search error: {0}")]
    Search(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("base fingerprint {found:016x} does not match expected {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
