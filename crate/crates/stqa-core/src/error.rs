//! Error types shared across the engine.

use thiserror::Error;

/// All engine failures. Shape and contract violations are reported eagerly
/// with enough context to locate the offending tensor or record.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("softmax: slice {slice} along axis {axis} is fully masked")]
    DegenerateSlice { axis: usize, slice: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("clip too short: {frames} frames, need at least {min}")]
    ClipTooShort { frames: usize, min: usize },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    Lookup { id: usize, vocab: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        EngineError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
