use thiserror::Error;

/// Malformed or inconsistent inputs to the model and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputError {
    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    /// A problem in a data file; `line` is 1-based and counts the header.
    #[error("{file}{}: {reason}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        file: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

impl InputError {
    pub(crate) fn data(file: impl Into<String>, line: Option<usize>, reason: impl Into<String>) -> Self {
        InputError::Data {
            file: file.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        InputError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Failures while computing a schedule or a mechanism outcome.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(
        "QP solver did not converge after {iterations} iterations \
         (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e}, gap {gap:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
        gap: f64,
    },
    #[error("QP solver hit a numerical breakdown: {0}")]
    Numerical(String),
    #[error("enumeration of {size} disconnection-time combinations exceeds the budget of {budget}")]
    BudgetExceeded { size: u128, budget: u128 },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<SolveError>,
    },
}

impl SolveError {
    pub fn context(self, context: impl Into<String>) -> Self {
        SolveError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is bad input rather than a solver failure.
    pub fn is_input(&self) -> bool {
        match self {
            SolveError::Input(_) | SolveError::BudgetExceeded { .. } => true,
            SolveError::Context { source, .. } => source.is_input(),
            _ => false,
        }
    }
}
