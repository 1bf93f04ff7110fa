use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("could not place {balls} non-overlapping balls after {attempts} attempts")]
    Initialization { balls: usize, attempts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expected a {expected}×{expected} frame, got {len} values")]
    FrameShape { expected: usize, len: usize },

    #[error("{0} already exists (pass force to overwrite)")]
    Exists(PathBuf),

    #[error("malformed dataset: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
