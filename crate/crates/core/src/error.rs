use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit together. `detail` names the offending axes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Trajectory lengths the UNet cannot process.
    #[error("length error: {0}")]
    Length(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sampling error at Euler step {step}: {detail}")]
    Sampling { step: usize, detail: String },

    #[error("guidance error in {term} cost: {detail}")]
    Guidance { term: &'static str, detail: String },

    #[error("rollout rejected after {attempts} attempts: {detail}")]
    Rollout { attempts: usize, detail: String },

    #[error("{path}: {kind}")]
    Load { path: PathBuf, kind: LoadError },

    #[error("shape error loading parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("not a dataset file")]
    NotDataset,
    #[error("not a checkpoint file")]
    NotCheckpoint,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated")]
    Truncated,
    #[error("malformed content: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Sampling { .. } | Error::Guidance { .. } => 3,
            _ => 2,
        }
    }
}
