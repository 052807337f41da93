//! Crate-wide error type.

/// Errors produced by schedule construction, training, guidance, and sampling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("step index {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: usize, num_classes: usize },
    #[error("model was trained against a different schedule (fingerprint mismatch)")]
    FingerprintMismatch,
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty sample set")]
    EmptyInput,
    #[error("{0} is required for this guidance strategy")]
    MissingInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("chain {chain} diverged to a non-finite state at step t={t}")]
    ChainDiverged { chain: usize, t: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
