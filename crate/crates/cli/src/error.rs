use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("unmatched ids between generated and reference manifests: {}", .0.join(", "))]
    UnmatchedIds(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] bgflow_core::Error),
    #[error(transparent)]
    Models(#[from] bgflow_models::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn manifest(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Manifest {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable category for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Manifest { .. } => "manifest",
            Error::UnmatchedIds(_) => "unmatched_ids",
            Error::Io { .. } => "io",
            Error::Core(bgflow_core::Error::Config(_)) => "config",
            Error::Core(_) => "core",
            Error::Models(bgflow_models::Error::Divergence { .. }) => "divergence",
            Error::Models(bgflow_models::Error::Config(_))
            | Error::Models(bgflow_models::Error::Core(bgflow_core::Error::Config(_))) => "config",
            Error::Models(bgflow_models::Error::Checkpoint(_)) => "checkpoint",
            Error::Models(_) => "model",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
