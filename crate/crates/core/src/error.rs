use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RegError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("only {survivors} correspondences survived filtering (need at least 3)")]
    DegenerateSet { survivors: usize },

    #[error("overlap target {target} unreachable; best achieved {best}")]
    OverlapUnreachable { target: f64, best: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RegError::Io {
            path: path.into(),
            source,
        }
    }
}
