use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nar_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    RawIo(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("too many streams: {0} (at most 8)")]
    Capacity(usize),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("stream mismatch: {0}")]
    StreamMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training aborted at epoch {epoch}: {reason}; last good checkpoint at {}", last_good.display())]
    TrainingAborted { epoch: usize, reason: String, last_good: PathBuf },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
