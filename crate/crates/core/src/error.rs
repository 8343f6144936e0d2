use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot fit bins on an empty dataset")]
    EmptyDataset,

    #[error("token {id} at position {position} is not an action token")]
    NotActionToken { position: usize, id: u32 },

    #[error("local class {class} out of range for {classes} action classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("diffusion time {0} is outside [0, 1]")]
    InvalidTime(f64),

    #[error("reverse step requires 0 <= s < t <= 1, got s = {s}, t = {t}")]
    InvalidStep { s: f64, t: f64 },

    #[error("no position contributes to the loss (empty mask set)")]
    EmptyMaskSet,

    #[error("a diffusion schedule needs at least one step")]
    EmptySchedule,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
