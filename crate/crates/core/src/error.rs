use thiserror::Error;

/// Errors raised by the planners.
///
/// Conditions that are part of a plan's outcome (gating rejections,
/// infeasible recompute selections, validation violations) are carried as
/// data on the plan types instead.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("dimension error on axis `{axis}`: {value} is not compatible with ratio {ratio}")]
    Dimension {
        axis: &'static str,
        value: u64,
        ratio: u64,
    },

    #[error("sample too short: {frames} frames, shortest bucket needs {shortest}")]
    SampleTooShort { frames: u64, shortest: u64 },

    #[error("unknown chunk `{0}`")]
    UnknownChunk(String),

    #[error("malformed timeline: {0}")]
    MalformedTimeline(String),

    #[error("exhaustive search supports at most {max} chunks, got {got}")]
    TooManyChunks { got: usize, max: usize },

    #[error("memory overflow: projected {needed} bytes exceeds device memory {available} by {} bytes", .needed - .available)]
    Overflow { needed: u64, available: u64 },

    #[error("windows leave gaps: stride {stride} exceeds window {window}")]
    Gap { stride: u64, window: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PlanError {
    fn from(err: std::io::Error) -> Self {
        PlanError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PlanError>;
