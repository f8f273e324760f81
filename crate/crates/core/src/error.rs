use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("sphere tracing diverged on {count} rays (of {total} foreground-adjacent, first at row/col {first:?})")]
    TraceDiverged { count: usize, total: usize, first: Vec<(usize, usize)> },
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), err: source }
    }

    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_) | Error::Dataset(_) | Error::Checkpoint(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
