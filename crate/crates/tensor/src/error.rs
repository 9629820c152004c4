use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Shapes or layer settings that cannot work together.
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },

    #[error("{op}: input has no time steps")]
    EmptyInput { op: &'static str },

    #[error("attention: query row {row} of batch {batch} has every key masked")]
    FullyMasked { batch: usize, row: usize },

    #[error("{op}: mask selects no elements")]
    EmptyMask { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
