use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Dataset {
        path: PathBuf,
        line: u64,
        column: Option<usize>,
        message: String,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("missing {path}; run `cmp {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error(transparent)]
    Model(cmp_core::Error),
}

impl From<cmp_core::Error> for CliError {
    fn from(e: cmp_core::Error) -> Self {
        match e {
            cmp_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    /// Stable, machine-readable class printed in front of every error.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Dataset { .. } => "dataset",
            CliError::Artifact { .. } => "artifact",
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::Model(_) => "model",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Dataset { .. } => 5,
            CliError::Artifact { .. } => 6,
            CliError::MissingArtifact { .. } => 7,
            CliError::Model(_) => 8,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
