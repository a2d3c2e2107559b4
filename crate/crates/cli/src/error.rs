use serde_json::{json, Value};
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Volume(#[from] voxstream::Error),
    #[error(transparent)]
    Ensemble(#[from] voxstream_ensemble::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step {step:?} ({op}) failed: {source}")]
    Step {
        step: String,
        op: String,
        #[source]
        source: Box<CliError>,
    },
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Variant name of a `Debug` rendering, e.g. `MissingFile` for `MissingFile("x")`.
fn variant_name(debug: &str) -> String {
    debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or_default()
        .to_string()
}

impl CliError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> String {
        match self {
            CliError::Volume(e) => variant_name(&format!("{e:?}")),
            CliError::Ensemble(voxstream_ensemble::Error::Volume(e)) => variant_name(&format!("{e:?}")),
            CliError::Ensemble(e) => variant_name(&format!("{e:?}")),
            CliError::Config(_) => "ConfigError".into(),
            CliError::Step { .. } => "StepError".into(),
            CliError::Bind { .. } => "BindError".into(),
            CliError::Io(_) => "Io".into(),
        }
    }

    pub fn is_cancelled(&self) -> bool {
        match self {
            CliError::Volume(voxstream::Error::Cancelled) => true,
            CliError::Ensemble(e) => e.is_cancelled(),
            CliError::Step { source, .. } => source.is_cancelled(),
            _ => false,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        if let CliError::Step { step, op, source } = self {
            v["step"] = json!(step);
            v["op"] = json!(op);
            v["cause"] = source.to_json();
        }
        v
    }

    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
