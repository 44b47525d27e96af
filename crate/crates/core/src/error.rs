use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no actions")]
    NoActions,

    #[error("token {token} out of range for {bins} bins")]
    TokenOutOfRange { token: usize, bins: usize },

    #[error("chunk shorter than min horizon ({len} < {min_actions})")]
    ChunkTooShort { len: usize, min_actions: usize },

    #[error("unreachable: target is {distance_mm:.1} mm from the base, reach is {reach_mm:.1} mm")]
    Unreachable { distance_mm: f64, reach_mm: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("record {index}: {message}")]
    CorruptRecord { index: usize, message: String },

    #[error("manifest inconsistent: {0}")]
    ManifestInconsistent(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
