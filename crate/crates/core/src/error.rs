use thiserror::Error;

/// Errors raised by the alignment pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, normalization).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A statistic needs more rows than the batch provides.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A pooled embedding had (near) zero norm before normalization.
    #[error("degenerate embedding: pre-normalization norm {norm:e}")]
    DegenerateEmbedding { norm: f64 },

    /// Iteration failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Reading or writing a container failed.
    #[error("i/o failure: {0}")]
    Io(String),

    /// Training stopped at `step`; `record` holds that step's telemetry when
    /// the loss itself could be evaluated.
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted {
        step: u64,
        reason: String,
        record: Option<Box<crate::trainer::StepRecord>>,
    },
}

impl Error {
    /// Whether the failure came from the arithmetic rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::DegenerateEmbedding { .. } | Error::TrainingAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
