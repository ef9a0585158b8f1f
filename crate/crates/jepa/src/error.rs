use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape / channel mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Spatial geometry violation (e.g. image size not divisible by patch size).
    #[error("geometry error: {0}")]
    Geometry(String),
    /// API contract violation (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Numerically degenerate input (e.g. zero-variance data fed to PCA).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
