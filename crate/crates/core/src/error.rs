use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for an op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A softmax row (or another reduction) had no admissible entries.
    #[error("degenerate row {row} in {op}: {detail}")]
    DegenerateRow {
        op: &'static str,
        row: usize,
        detail: String,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A parameter was stepped without a gradient.
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    /// Episode sampling could not satisfy the request.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A feature file failed to parse.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A checkpoint file was malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, episode {episode} (seed {seed})")]
    NonFiniteLoss {
        epoch: usize,
        episode: usize,
        seed: u64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
