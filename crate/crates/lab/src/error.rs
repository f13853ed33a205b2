use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss} stayed above {limit} for {window} steps")]
    Divergence {
        step: usize,
        loss: f64,
        limit: f64,
        window: usize,
    },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Core(#[from] excitor_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for user or configuration errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Divergence { .. } | LabError::NonFiniteLoss { .. } => 3,
            LabError::Core(excitor_core::Error::NonFiniteGradient { .. }) => 3,
            LabError::Core(excitor_core::Error::DegenerateRow { .. }) => 3,
            _ => 2,
        }
    }
}

/// Problems with an XCT1 container.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"XCT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("unknown tensors: {}", .0.join(", "))]
    UnknownTensors(Vec<String>),
    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),
    #[error("metadata line {line}: {msg}")]
    Metadata { line: usize, msg: String },
    #[error("tensor {name}: {msg}")]
    Tensor { name: String, msg: String },
    #[error("{0}")]
    Other(String),
}
