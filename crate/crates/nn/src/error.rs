use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
