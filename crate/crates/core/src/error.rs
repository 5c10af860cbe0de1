use std::path::PathBuf;

/// Errors produced by identification, inverse cost recovery and the forward solver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },

    #[error("line search stalled after {retries} retries at iteration {iteration}")]
    Stalled { iteration: usize, retries: usize },

    #[error("trajectory {index}: generation failed after {attempts} attempts")]
    Generation { index: usize, attempts: usize },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 usage, 3 data error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::UnknownSystem(_) | Error::InvalidParams(_) => 2,
            Error::InvalidInput(_)
            | Error::DimensionMismatch(_)
            | Error::Io { .. }
            | Error::Parse { .. } => 3,
            Error::DegenerateData(_)
            | Error::Divergence { .. }
            | Error::Stalled { .. }
            | Error::Generation { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
