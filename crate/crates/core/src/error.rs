use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("modality mismatch: expected {expected}, found {found}")]
    ModalityMismatch { expected: String, found: String },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("slice index {index} out of range for depth {depth}")]
    SliceOutOfRange { index: usize, depth: usize },

    #[error("mask is empty")]
    EmptyMask,

    #[error("{groups} groups cannot fill {splits} splits")]
    InsufficientGroups { groups: usize, splits: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("invalid marker: {0}")]
    InvalidMarker(String),

    #[error("slice {0} has no model mask to refine")]
    NotSegmented(usize),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Structured decode/encode failures of the on-disk and wire formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("truncated input: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("inconsistent payload: {0}")]
    Inconsistent(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("content hash mismatch: manifest {expected}, blob {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid run-length counts: {0}")]
    RleCounts(String),

    #[error("png: {0}")]
    Png(String),
}
