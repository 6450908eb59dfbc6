use alloc::string::String;

/// Errors raised by the localization pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("trial `{0}` has no samples")]
    EmptyTrial(String),

    #[error("synchronization failed: {0}")]
    Sync(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("window sequences are not aligned: {0}")]
    Misaligned(String),

    #[error("magnetic map has no positioned samples")]
    EmptyMap,

    #[error("no landmark passes the selection threshold {threshold}")]
    NoLandmarks { threshold: f64 },

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("length mismatch: {left} estimates vs {right} ground-truth positions")]
    LengthMismatch { left: usize, right: usize },

    #[error("alignment set is empty: no pair closer than {eps} m")]
    EmptyAlignmentSet { eps: f64 },

    #[error("rank-deficient alignment pairs: {0}")]
    Rank(String),

    #[error("position coincides with a dipole center")]
    Singularity,

    #[error("degenerate trajectory segment between waypoints {0} and {1}")]
    DegenerateSegment(usize, usize),
}

pub type Result<T> = core::result::Result<T, Error>;
