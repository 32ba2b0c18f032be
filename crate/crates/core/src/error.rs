use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("degenerate bounding box (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutsideImage {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("RLE counts sum to {sum}, expected {expected}")]
    RleCountMismatch { sum: u64, expected: u64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
