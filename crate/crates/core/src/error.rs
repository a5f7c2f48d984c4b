//! Shared error type for the whole pipeline.
//!
//! Every variant maps to one error category so the CLI can translate
//! failures into stable exit codes.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Input values violate a precondition (non-finite components, bad norms).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Arguments are structurally wrong (counts, ranges, index bounds).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Array shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Fewer samples than unknowns in a least-squares fit.
    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    /// Normal-equation matrix exceeded the condition-number cap.
    #[error("ill-conditioned system ({context}): condition number {cond:.3e} exceeds cap {cap:.3e}")]
    IllConditioned {
        cond: f64,
        cap: f64,
        context: String,
    },

    /// Malformed file contents (bad magic, truncated header).
    #[error("format error: {0}")]
    Format(String),

    /// Valid file but an unsupported feature (e.g. exotic NIfTI datatype).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Bad or incomplete run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Operation requires state that has not been initialized.
    #[error("state error: {0}")]
    State(String),

    /// NaN or Inf appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint does not match the model configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category name, used by the CLI for machine-parsable output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Shape(_) => "shape",
            Error::Underdetermined(_) => "underdetermined",
            Error::IllConditioned { .. } => "ill-conditioned",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
