use thiserror::Error;

/// Errors raised by the dose-finding engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DoseError {
    #[error("singular (rho, eta) transform: {0}")]
    SingularTransform(String),

    #[error("invalid {field}: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("singular information matrix (det = {det:e})")]
    SingularInformation { det: f64 },

    #[error("no dose in [{x_min}, {x_max}] satisfies the overdose constraint")]
    InfeasibleConstraint { x_min: f64, x_max: f64 },

    #[error("replication {index}, patient {patient}: {source}")]
    Replication {
        index: usize,
        patient: usize,
        #[source]
        source: Box<DoseError>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("study aborted: {failed} of {total} replications failed (first: {first})")]
    StudyAborted {
        failed: usize,
        total: usize,
        first: String,
    },
}

impl DoseError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DoseError::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DoseError>;
