use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowgen::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} needs {}; run `flowgen {stage_needed}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        stage_needed: &'static str,
        path: PathBuf,
    },

    #[error("{} already exists; pass --force to overwrite", path.display())]
    Exists { path: PathBuf },

    #[error("{} was produced under config hash {found}, current config hashes to {expected}", path.display())]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
