use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] sio_core::Error),

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: u64, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scan {index} at t = {t}: {msg}")]
    Bracketing { index: usize, t: f64, msg: String },

    #[error("stage `{stage}` needs `{}`; run `{producer}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        path: PathBuf,
        producer: &'static str,
    },

    #[error("no ground truth in the sequence bundle; nothing to evaluate")]
    NoGroundTruth,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AppError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.to_path_buf(),
        source,
    }
}
