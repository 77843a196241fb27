use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API was used outside its contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid PEFT spec: {0}")]
    Spec(String),

    /// Operation is not valid for the model's current PEFT state.
    #[error("invalid model state: {0}")]
    State(String),

    #[error("{path}:{line}: parse error: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("validation failed for `{pair_id}`: {reason}")]
    Validation { pair_id: String, reason: String },

    #[error("join failed: orphan predictions {orphans:?}, missing predictions {missing:?}")]
    Join { orphans: Vec<String>, missing: Vec<String> },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("base checkpoint checksum mismatch: delta expects {expected}, base has {actual}")]
    Checksum { expected: String, actual: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
