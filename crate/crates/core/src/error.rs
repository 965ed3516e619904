//! Error types shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A numeric contract was violated (non-finite values, invalid domain).
    Numeric { op: &'static str, detail: String },
    /// An API contract was violated (e.g. backward on a non-scalar root).
    Contract(String),
    /// Invalid configuration value or unknown identifier.
    Config(String),
    /// The adaptation stream reached a state the recurrences cannot handle
    /// (zero running entropy average).
    DegenerateStream(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Numeric { op, detail } => write!(f, "{op}: numeric error: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::DegenerateStream(msg) => write!(f, "degenerate stream: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
