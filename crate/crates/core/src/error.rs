//! Error taxonomy shared across the workspace.
//!
//! Variants are grouped by how callers are expected to react: configuration
//! and parse problems are user-fixable, numeric failures abort a run, and
//! checkpoint errors distinguish an unreadable file from a readable file that
//! does not fit the requested model.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes are incompatible; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside an operation's mathematical domain (log of a
    /// non-positive value, negative standard deviation, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A reduction slice carried no usable entries (e.g. softmax over a row
    /// that is entirely negative infinity).
    #[error("degenerate slice: {0}")]
    DegenerateSlice(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tabular input could not be parsed; line numbers are 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A stratified split could not be formed.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// A retained gene has no usable spread (min == max).
    #[error("degenerate gene: {0}")]
    DegenerateGene(String),

    /// A statistic has an empty or zero-variance denominator.
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// A loss term stopped being finite; training aborts.
    #[error("numeric failure in `{term}` at epoch {epoch}")]
    Numeric { term: String, epoch: usize },

    #[error("checkpoint magic mismatch: not a model checkpoint")]
    CheckpointMagic,

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// The file read cleanly but its contents are inconsistent (unknown
    /// tensor names, bad section tags, unsupported rng algorithm).
    #[error("checkpoint contents invalid: {0}")]
    CheckpointContents(String),

    /// Checkpoint tensor does not match the receiving model.
    #[error("checkpoint shape mismatch for tensor `{name}`: file has {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Process exit code the command-line surface maps this error to.
    /// 2 = configuration/parse, 3 = numeric failure, 4 = i/o and checkpoints.
    pub fn exit_code(&self) -> i32 {
        use CoreError::*;
        match self {
            Shape(_) | Domain(_) | Contract(_) | Config(_) | Parse { .. }
            | Stratification(_) | DegenerateGene(_) => 2,
            DegenerateSlice(_) | UndefinedStatistic(_) | Numeric { .. } => 3,
            CheckpointMagic
            | CheckpointVersion { .. }
            | CheckpointTruncated(_)
            | CheckpointContents(_)
            | CheckpointShape { .. }
            | Io(_)
            | Json(_) => 4,
        }
    }
}
