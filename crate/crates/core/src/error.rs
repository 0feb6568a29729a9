use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero at divisor index {index}")]
    DivisionDomain { index: usize },
    #[error("{op}: argument out of domain at index {index} (value {value})")]
    DomainError {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss carries no differentiation record")]
    NoTape,
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("upsampling factor must be at least 1")]
    InvalidFactor,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("model has no high-resolution head")]
    MissingHRHead,
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("phase order violation: {0}")]
    PhaseOrderViolation(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format version mismatch: found {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint manifest corrupt: {0}")]
    ManifestCorrupt(String),
    #[error("corrupt sample `{id}`: {reason}")]
    CorruptSample { id: String, reason: String },
    #[error("generator parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("shift ({dx}, {dy}) exceeds the maximum of 2 pixels")]
    ShiftOutOfRange { dx: i64, dy: i64 },
    #[error("invalid superpixel grid: {0}")]
    InvalidGrid(String),
    #[error("latent dimension {0} too large for quadrature (max 2)")]
    DimTooLarge(usize),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
