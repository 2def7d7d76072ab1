//! Crate-wide error type.
//!
//! Errors are grouped by the failure class a caller has to react to:
//! bad arguments, bad configuration, malformed input data, numeric
//! breakdown during training/inference, and checkpoint I/O.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A function was called with values outside its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data, with a location when one is known.
    #[error("data format error{}: {msg}", location_suffix(*.row, *.col))]
    Format {
        msg: String,
        /// 1-based row in the source file, when applicable.
        row: Option<usize>,
        /// 1-based column in the source file, when applicable.
        col: Option<usize>,
    },

    /// A computation produced NaN/Inf or otherwise broke down numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Corrupt, truncated, or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn format_at(msg: impl Into<String>, row: usize, col: usize) -> Self {
        Error::Format {
            msg: msg.into(),
            row: Some(row),
            col: Some(col),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            msg: msg.into(),
            row: None,
            col: None,
        }
    }
}

fn location_suffix(row: Option<usize>, col: Option<usize>) -> String {
    match (row, col) {
        (Some(r), Some(c)) => format!(" at row {r}, column {c}"),
        (Some(r), None) => format!(" at row {r}"),
        _ => String::new(),
    }
}
