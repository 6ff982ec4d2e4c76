use thiserror::Error;

/// Errors produced by sketch construction, release and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("item {item} is outside the universe [1, {d}]")]
    ItemOutOfRange { item: u64, d: u64 },

    #[error("item {item} at stream position {position} is outside the universe [1, {d}]")]
    StreamItemOutOfRange { item: u64, d: u64, position: usize },

    #[error("invalid privacy parameters: {0}")]
    InvalidParams(String),

    #[error("sketch has already been released once")]
    AlreadyReleased,

    #[error("inconsistent sketch state: {0}")]
    InconsistentSketch(String),

    #[error("sketch mismatch: {0}")]
    Mismatch(String),

    #[error("universe size {d} exceeds the iteration cap {cap}")]
    UniverseTooLarge { d: u64, cap: u64 },

    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
