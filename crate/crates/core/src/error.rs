//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor primitives, the network, the optimizer and the
/// evaluation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An operation produced (or was handed) a NaN or infinite value.
    NonFinite { op: &'static str },
    /// A caller broke an operation contract (e.g. backward on a non-scalar).
    Contract(&'static str),
    /// Invalid configuration value.
    Config(String),
    /// An operation that needs at least one element got none.
    Empty(&'static str),
    /// Snapshot contents do not match the network they are loaded into.
    Integrity(String),
    /// Training aborted; the iteration at which the loss went non-finite.
    Diverged { iteration: u64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Empty(op) => write!(f, "{op}: empty input"),
            CoreError::Integrity(msg) => write!(f, "integrity error: {msg}"),
            CoreError::Diverged { iteration } => {
                write!(f, "training diverged: loss non-finite at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
