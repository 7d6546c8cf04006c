use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("extent {width}x{height} m is smaller than one {side} m submap")]
    Sizing { width: f64, height: f64, side: f64 },
    #[error("instance count must be at least 1")]
    NoInstances,
    #[error("palette needs at least one class and one color")]
    EmptyPalette,
    #[error("stride must be positive, got {0}")]
    InvalidStride(f64),
    #[error("need {needed} instances within {radius} m of the pose, found {found} (short by {})", needed - found)]
    TooFewNearby {
        needed: usize,
        found: usize,
        radius: f64,
    },
    #[error("query has {hints} hint(s); {mode} needs at least {min}")]
    TooFewHints {
        mode: &'static str,
        hints: usize,
        min: usize,
    },
    #[error("no instance farther than {0} m from the pose to build a wrong hint from")]
    NoDistantInstance(f64),
    #[error("could not place {wanted} query poses after {attempts} attempts")]
    PoseSampling { wanted: usize, attempts: usize },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index rejects descriptor {row}: {reason}")]
    Index { row: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
