use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pipeline stage `{stage}` failed: {msg}")]
    Stage { stage: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
