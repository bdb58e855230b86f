use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up for `op`.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix was built from a buffer of the wrong length.
    DataLength { expected: usize, got: usize },
    /// Parameter or gradient sets with different group layouts.
    GroupMismatch { index: usize },
    InvalidConfig(&'static str),
    /// The detector saw steps out of order.
    OutOfOrderStep { last: u64, got: u64 },
    /// The loss stayed non-finite after a clean recomputation.
    TrainingHealth { step: u64 },
    /// A token id outside the vocabulary.
    TokenOutOfRange { token: u32, vocab: usize },
    /// A serialized snapshot could not be decoded.
    Snapshot(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DataLength { expected, got } => {
                write!(f, "matrix data length {got}, expected {expected}")
            }
            Error::GroupMismatch { index } => write!(f, "parameter group {index} does not match"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::OutOfOrderStep { last, got } => {
                write!(f, "detector step {got} observed after step {last}")
            }
            Error::TrainingHealth { step } => write!(
                f,
                "non-finite loss at step {step} after a clean recomputation"
            ),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} outside vocabulary of size {vocab}")
            }
            Error::Snapshot(msg) => write!(f, "malformed snapshot: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
