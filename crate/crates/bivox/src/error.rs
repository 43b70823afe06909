//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for {stream} vocabulary of size {size}")]
    TokenOutOfRange {
        stream: &'static str,
        id: u32,
        size: usize,
    },

    #[error("speech length {len} is not divisible by grouping factor {k}")]
    NotGrouped { len: usize, k: usize },

    #[error("dialogue modality does not fit pattern {pattern}: {detail}")]
    ModalityMismatch { pattern: String, detail: String },

    #[error("sequence of {requested} steps would exceed max_steps {max}")]
    MaxStepsExceeded { requested: usize, max: usize },

    #[error("shape mismatch for parameter `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("chunk count {chunks} does not match speech position count {positions}")]
    ChunkPositionMismatch { chunks: usize, positions: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("schedule stage {found} is not valid here (expected {expected})")]
    WrongStage { expected: String, found: String },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error("text `{0:?}` contains bytes outside the printable alphabet")]
    Unencodable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
