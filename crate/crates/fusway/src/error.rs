//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid time window: {0}")]
    InvalidWindow(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset format: {0}")]
    DatasetFormat(String),
    #[error("box placement failed after {0} retries")]
    PlacementFailed(usize),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("degenerate statistic: {0}")]
    DegenerateStatistic(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
