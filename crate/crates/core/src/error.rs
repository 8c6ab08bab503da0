use std::path::PathBuf;

use fliplearn_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("phantom rejected: {0}")]
    PhantomRejected(String),
    #[error("no flank of the box is wide enough to supply fill pixels")]
    FillSourceUnavailable,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at {stage} {index}: {detail}")]
    Divergence {
        stage: &'static str,
        index: usize,
        detail: String,
    },
    #[error("missing artifact {}: {detail}", path.display())]
    MissingArtifact { path: PathBuf, detail: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
