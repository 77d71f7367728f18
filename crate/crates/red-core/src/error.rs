//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the detection pipeline.
///
/// Variants are grouped by the exit-code classes the CLI maps them to:
/// configuration problems, data problems, and numerical failures.
#[derive(Debug, Error)]
pub enum RedError {
    /// Invalid configuration (bad flag values, inconsistent schedule, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Problems reading or validating data.
    #[error("data error: {0}")]
    Data(String),

    /// A cell that could not be parsed, with its location.
    #[error("data error: row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Shape mismatch between cooperating arrays.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Numerical failure (non-finite loss, divergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Covariance factorization failed even after jitter escalation.
    #[error("factorization failed: kernel matrix not positive definite after jitter up to {jitter_ceiling:.3e}")]
    FactorizationFailed { jitter_ceiling: f64 },

    /// The base classifier misclassifies nothing, so there is no residual
    /// signal to learn from. Detection on such classifiers is undefined.
    #[error(
        "base classifier has no misclassified training samples; \
         residual error detection needs at least one"
    )]
    NoMisclassifications,

    /// A class required by a detector is absent from the training data.
    #[error("class {class} has no training samples")]
    ClassMissing { class: usize },

    /// Not enough correctly classified rows to build an adversarial batch.
    #[error("adversarial batch needs {needed} correctly classified rows, only {available} available")]
    NotEnoughCorrectRows { needed: usize, available: usize },

    /// Every optimizer restart failed.
    #[error("all {0} optimizer restarts failed")]
    AllRestartsFailed(usize),

    /// I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    /// CSV (de)serialization failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl RedError {
    /// Process exit code class for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            RedError::Config(_) => 2,
            RedError::Data(_)
            | RedError::Parse { .. }
            | RedError::Dimension(_)
            | RedError::ClassMissing { .. }
            | RedError::NotEnoughCorrectRows { .. }
            | RedError::Io(_)
            | RedError::Serde(_)
            | RedError::Csv(_) => 3,
            RedError::Numerical(_)
            | RedError::FactorizationFailed { .. }
            | RedError::NoMisclassifications
            | RedError::AllRestartsFailed(_) => 4,
        }
    }
}
