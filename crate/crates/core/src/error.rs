use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation (degenerate box, bad size, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    /// A stage ran before the stage that produces its inputs.
    #[error("missing artifact {path}: run stage `{stage}` first")]
    MissingArtifact { stage: String, path: PathBuf },

    /// An upstream artifact exists but was produced under a different configuration.
    #[error("stale artifact {path}: stage `{stage}` was run with a different config, re-run it")]
    StaleArtifact { stage: String, path: PathBuf },

    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-parsable class name, used by the command-line driver.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::Decode { .. } => "decode",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::StaleArtifact { .. } => "stale-artifact",
            Error::Training(_) => "training",
        }
    }
}
