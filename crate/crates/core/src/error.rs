use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the core crate.
///
/// Numeric kernels treat NaN/Inf as corruption, not data: any op that would
/// produce a non-finite value fails immediately instead of letting the poison
/// spread through a training run or a multi-hour cascade.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient check failed for {case}: max relative error {max_rel:.3e} exceeds {tolerance:.1e}")]
    GradCheckFailed {
        case: String,
        max_rel: f64,
        tolerance: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tile ({level},{col},{row}): {msg}")]
    Tile {
        level: u8,
        col: u64,
        row: u64,
        msg: String,
    },

    #[error("stage at level {level} is missing {count} input tiles, first few: {first_missing}")]
    MissingTiles {
        level: u8,
        count: usize,
        first_missing: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("fetch failed for {url}: {msg}")]
    Fetch { url: String, msg: String },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
