//! Error type shared by every module of the crate.
//!
//! Errors carry enough context to be actionable from a CLI message:
//! dimension mismatches name the offending field, numerical failures name
//! the time step or iteration where they occurred, and validation failures
//! carry the full list of violated invariants.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two related objects disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        /// What was being checked (field or operation name).
        context: String,
        /// Expected shape or length.
        expected: String,
        /// Actual shape or length.
        got: String,
    },

    /// Parameter or configuration values violate a documented invariant.
    /// The message lists every violation found, one per line.
    #[error("invalid parameters:\n{0}")]
    Invalid(String),

    /// A linear-algebra operation failed beyond recovery (singular system
    /// after jitter escalation, non-finite values, ...).
    #[error("numerical failure at {location}: {message}")]
    Numerical {
        /// Time step, iteration index, or operation name.
        location: String,
        /// What went wrong.
        message: String,
    },

    /// The requested operation is outside this crate's supported range.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// File-system failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed input file (CSV or JSON).
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
