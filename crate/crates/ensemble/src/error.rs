use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] voxstream::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("ensemble has no members with readable time steps: {0}")]
    EmptyEnsemble(String),
    #[error("unknown name: {0}")]
    UnknownName(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("sample domain is empty")]
    EmptySampleDomain,
    #[error("records were not sampled alike: {0}")]
    SampleMismatch(String),
    #[error("features incomplete: {0}")]
    IncompleteFeatures(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("at most 4 axes can drive transfer functions, got {0}")]
    TooManyAxes(usize),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}

impl Error {
    pub fn is_cancelled(&self) -> bool {
        matches!(self, Error::Volume(voxstream::Error::Cancelled))
    }
}
