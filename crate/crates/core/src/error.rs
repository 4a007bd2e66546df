use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GdrtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GdrtError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocab { id: u32, vocab_size: usize },

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too many groups: requested {groups}, only {distinct} distinct values")]
    TooManyGroups { groups: usize, distinct: usize },

    #[error("duplicate title for item {item_id}")]
    DuplicateTitle { item_id: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("item {0} has no group assignment")]
    MissingGroup(usize),

    #[error("oracle failed to converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<GdrtError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl GdrtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdrtError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        GdrtError::Json {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        GdrtError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
