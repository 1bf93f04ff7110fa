use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid attention window: scale ({sx}, {sy}) must be strictly positive")]
    InvalidWindow { sx: f64, sy: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inference step {step} exceeds the {slots} available slots")]
    StepOverflow { step: usize, slots: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite log-weight: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Dataset(#[from] ballsim::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
