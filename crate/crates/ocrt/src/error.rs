use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OcrtError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("slot refinement diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("cannot derive a prompt from an empty mask")]
    EmptyMask,

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("phase `{phase}` requires a prior `{needs}` checkpoint")]
    PhaseOrdering { phase: String, needs: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OcrtError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OcrtError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            OcrtError::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, OcrtError>;
