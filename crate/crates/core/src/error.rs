use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("sample {sample}: {reason}")]
    Sample { sample: String, reason: String },

    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },

    #[error("non-finite loss at epoch {epoch} step {step}: ce={ce} supcon={supcon} total={total}")]
    NonFiniteLoss { epoch: usize, step: usize, ce: f64, supcon: f64, total: f64 },

    #[error("ensemble: {0}")]
    Ensemble(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Label(_) => "label",
            Error::Sample { .. } => "sample",
            Error::Parameter { .. } => "parameter",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Ensemble(_) => "ensemble",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
