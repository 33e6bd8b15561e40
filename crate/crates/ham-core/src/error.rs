use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum HamError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at position {position}")]
    NonFinite { what: &'static str, position: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("cache positions must strictly increase: last {last}, got {got}")]
    NonMonotonePosition { last: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("selected count {selected} exceeds sequence length {total}")]
    UsageExceedsLength { selected: usize, total: usize },

    #[error("no bracket found for target {0}")]
    NoBracket(f64),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HamError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HamError::Dimension {
            context,
            expected,
            got,
        })
    }
}
