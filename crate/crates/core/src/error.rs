use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, truncated payload, bad manifest).
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Degenerate numerical input (constant volume, all ages equal, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A constraint cannot be satisfied (e.g. masking fraction too high).
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unknown subject: {0}")]
    UnknownSubject(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite values appeared where the math guarantees finite ones.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
