//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by the given operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand with an unusable shape.
    #[error("{op}: invalid shape {shape:?}: {message}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        message: String,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A band name referenced by an index or embedding is absent from the band map.
    #[error("missing band {0:?} in band map")]
    MissingBand(String),

    /// Violated operation precondition (empty input, bad argument range).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Malformed serialized data.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Checksum or content mismatch on load.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Overlapping or incomplete parameter partition.
    #[error("partition error: {0}")]
    Partition(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NanLoss { step: usize, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
