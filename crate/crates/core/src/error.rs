use alloc::string::String;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point cloud holds {0} streams, at most 8 are supported")]
    Capacity(usize),
    #[error("need at least 2 points, got {0}")]
    InsufficientPoints(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing stream `{0}`")]
    MissingStream(String),
    #[error("point is culled by the camera")]
    Culled,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
