use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FasError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: invalid label `{label}` (expected live or attack)")]
    Label { path: PathBuf, line: usize, label: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("shape: {0}")]
    Shape(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("misuse: {0}")]
    Misuse(String),
    #[error("merge: {0}")]
    Merge(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("argument: {0}")]
    Argument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error(transparent)]
    Nn(#[from] fas_nn::NnError),
}

impl FasError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FasError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            FasError::Usage(_) | FasError::Config(_) | FasError::Argument(_) => 1,
            FasError::Numerical(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-readable tag for the one-line error record.
    pub fn kind(&self) -> &'static str {
        match self {
            FasError::Usage(_) => "usage",
            FasError::Config(_) => "config",
            FasError::Parse { .. } => "parse",
            FasError::Label { .. } => "label",
            FasError::Io { .. } => "io",
            FasError::Image { .. } => "image",
            FasError::Shape(_) => "shape",
            FasError::Validation(_) => "validation",
            FasError::Geometry(_) => "geometry",
            FasError::Precondition(_) => "precondition",
            FasError::Misuse(_) => "misuse",
            FasError::Merge(_) => "merge",
            FasError::Metric(_) => "metric",
            FasError::Protocol(_) => "protocol",
            FasError::Argument(_) => "argument",
            FasError::Checkpoint(_) => "checkpoint",
            FasError::Numerical(_) => "numerical",
            FasError::Nn(_) => "nn",
        }
    }
}

pub type Result<T, E = FasError> = std::result::Result<T, E>;
