use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed metadata: {0}")]
    MalformedMeta(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("inconsistent slice shape: {0}")]
    InconsistentSliceShape(String),
    #[error("unsupported pixel type: {0}")]
    UnsupportedPixelType(String),
    #[error("octree would need {projected} nodes, limit is {limit}")]
    NodeLimitExceeded { projected: u64, limit: u64 },
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),
    #[error("window size must be odd, got {0}")]
    EvenWindowSize(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("too many components: {0}")]
    TooManyComponents(u64),
    #[error("random walker needs at least one foreground and one background seed")]
    MissingSeeds,
    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-binary input: {0}")]
    NonBinaryInput(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("keyframe times must be strictly increasing")]
    NonMonotoneKeyframes,
    #[error("image error: {0}")]
    Image(String),
    #[error("unknown name: {0}")]
    UnknownName(String),
    #[error("cancelled")]
    Cancelled,
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::MalformedMeta(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
