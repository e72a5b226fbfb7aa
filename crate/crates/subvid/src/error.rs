//! Error surface shared by every module.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shapes do not conform (broadcast, matmul inner dims, grid mismatch).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-facing contract was violated (non-scalar loss, empty input, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf surfaced in a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Prompt token id outside the closed vocabulary.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Invalid configuration value or schema violation.
    #[error("config error: {0}")]
    Config(String),

    /// Two subjects are indistinguishable under the prompt vocabulary.
    #[error("ambiguity error: {0}")]
    Ambiguous(String),

    /// Scene cannot be rendered (sprite out of bounds, ...).
    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint or report bytes are malformed.
    #[error("corruption error: {0}")]
    Corrupt(String),

    /// Checkpoint format version is not the one this build writes.
    #[error("incompatible checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
