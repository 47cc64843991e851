use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid grid model: {0}")]
    InvalidGrid(String),

    #[error("integration diverged at timestep {timestep}")]
    Divergence { timestep: usize },

    #[error("non-finite state derivative on bus {bus}")]
    NonFiniteDerivative { bus: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("episode too short: {len} states, need more than {needed}")]
    EpisodeTooShort { len: usize, needed: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("need at least {needed} classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },

    #[error("predictor/detector mismatch: detector paired with {expected}, got {got}")]
    ModelMismatch { expected: String, got: String },

    #[error("all {0} trials diverged")]
    AllTrialsDiverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
