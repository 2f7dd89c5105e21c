use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VildError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VildError {
    #[error("cannot normalize vector: {0}")]
    Normalization(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VildError>,
    },
}

impl VildError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        VildError::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        VildError::Data(msg.into())
    }

    pub fn format(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        VildError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VildError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        VildError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            VildError::Config { .. } | VildError::InvalidArgument(_) => 2,
            VildError::Format { .. } | VildError::Io { .. } | VildError::DimMismatch { .. } => 3,
            VildError::Empty(_) | VildError::Data(_) => 3,
            VildError::Normalization(_) | VildError::Numerical(_) => 4,
            VildError::Stage { source, .. } => source.exit_code(),
        }
    }
}
