use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the estimators, diagnostics and harness can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("treatment value {value} for subject {id} is not 0 or 1")]
    NonBinaryTreatment { id: String, value: f64 },

    #[error("empty treatment arm: {n_treated} treated, {n_control} control")]
    EmptyArm { n_treated: usize, n_control: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {field} for subject {id}")]
    NonFiniteValue { field: String, id: String },

    #[error("too few treated subjects: need at least {needed}, have {have}")]
    TooFewTreated { needed: usize, have: usize },

    #[error("subject {id} has {have} replicate(s), policy needs {needed}")]
    InsufficientReplicates { id: String, have: usize, needed: usize },

    #[error("no subject has more than one replicate")]
    NoReplicates,

    #[error("invalid error model: {0}")]
    InvalidErrorModel(String),

    #[error("moment generating function undefined at the requested parameter")]
    MgfUndefined,

    #[error("exponent {exponent:.3e} out of range{}", subject.as_ref().map(|s| format!(" (subject {s})")).unwrap_or_default())]
    NonFiniteExp { exponent: f64, subject: Option<String> },

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e}): {reason}")]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        reason: String,
    },

    #[error("singular correction matrix (smallest singular value {smallest_singular_value:.3e})")]
    SingularCorrection { smallest_singular_value: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("outcome is required but missing")]
    MissingOutcome,

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("all {reps} Monte Carlo repetitions failed for method {method}")]
    AllRepsFailed { method: String, reps: usize },

    #[error("bootstrap unstable: {failed} of {requested} replicates failed")]
    BootstrapUnstable { failed: usize, requested: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    /// Numerical failures map to CLI exit status 3; everything else is a
    /// validation/configuration problem (exit 2).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::MgfUndefined
                | Error::NonFiniteExp { .. }
                | Error::NotConverged { .. }
                | Error::SingularCorrection { .. }
                | Error::AllRepsFailed { .. }
                | Error::BootstrapUnstable { .. }
        )
    }
}
