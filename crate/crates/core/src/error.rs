//! Error type shared by all modules.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor math, DSP, training and the experiment harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or layer shapes do not line up; both sides are named.
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// An argument violates an operation's precondition.
    Argument { op: &'static str, message: String },
    /// An operation was called in a state it cannot handle
    /// (e.g. a missing gradient at optimizer-step time).
    State { op: &'static str, message: String },
    /// A NaN or infinity reached a boundary where finiteness is contractual.
    NonFinite { op: &'static str },
    /// A dataset or manifest problem (missing class, bad fold id, ...).
    Data { message: String },
    /// A checkpoint does not match the expected architecture.
    Checkpoint { message: String },
    /// A file is malformed or truncated.
    Format { message: String },
    /// Underlying I/O failure (message of the originating error).
    Io { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, expected, got } => {
                write!(f, "{op}: dimension mismatch: expected {expected}, got {got}")
            }
            Error::Argument { op, message } => write!(f, "{op}: invalid argument: {message}"),
            Error::State { op, message } => write!(f, "{op}: invalid state: {message}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Error::Data { message } => write!(f, "data error: {message}"),
            Error::Checkpoint { message } => write!(f, "checkpoint error: {message}"),
            Error::Format { message } => write!(f, "format error: {message}"),
            Error::Io { message } => write!(f, "io error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            message: e.to_string(),
        }
    }
}

pub(crate) fn dim_err(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Error {
    Error::Dimension {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn arg_err(op: &'static str, message: impl fmt::Display) -> Error {
    Error::Argument {
        op,
        message: message.to_string(),
    }
}

pub(crate) fn state_err(op: &'static str, message: impl fmt::Display) -> Error {
    Error::State {
        op,
        message: message.to_string(),
    }
}
