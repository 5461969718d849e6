use std::path::PathBuf;

/// Errors of the std layer. Each variant maps to a distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config file not found: {0}")]
    ConfigNotFound(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("training diverged in round {round}, epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        round: usize,
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("benchmark: {0}")]
    Bench(String),
    #[error(transparent)]
    Model(lecaps_core::Error),
}

impl From<lecaps_core::Error> for Error {
    fn from(e: lecaps_core::Error) -> Self {
        match e {
            lecaps_core::Error::Config(msg) => Error::Config(msg),
            other => Error::Model(other),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code; `2` is left to argument-parsing errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigNotFound(_) => 3,
            Error::Config(_) => 4,
            Error::Io { .. } => 5,
            Error::Format { .. } => 6,
            Error::CheckpointMismatch(_) => 7,
            Error::Diverged { .. } => 8,
            Error::Bench(_) => 9,
            Error::Model(_) => 10,
        }
    }
}
