use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T, E = DkghError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DkghError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A caller broke an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Invalid configuration (k > N, empty class, too few subjects, ...).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Input data out of its admissible range.
    #[error("validation failed: {0}")]
    Validation(String),
    /// Metric has no defined value for the given labels.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl DkghError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DkghError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// by an internal fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            DkghError::Config(_) | DkghError::Validation(_) | DkghError::Dimension { .. }
        )
    }
}
