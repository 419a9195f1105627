//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not admit the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside the operation's domain (bad timestep, label, log of
    /// a non-positive entry, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Division by a denormal/zero entry or an evaluation too close to a
    /// known singularity.
    #[error("singularity error: {0}")]
    Singularity(String),

    /// Iterative solver failed to converge, or a non-finite value surfaced
    /// where the contract requires finite results.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API contract violation (non-scalar loss, empty tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric abort, 4 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::Singularity(_) => 3,
            Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
