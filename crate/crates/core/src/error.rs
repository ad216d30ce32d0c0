use thiserror::Error;

/// Errors raised anywhere in the projection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter outside the normalizable domain: {0}")]
    Domain(String),

    #[error("quadrature tails not negligible: {0}")]
    Tail(String),

    #[error("Fisher matrix singular or ill-conditioned (pivot {pivot:e}, scale {scale:e})")]
    SingularFisher { pivot: f64, scale: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("tangent field is not square-integrable under the current density: {0}")]
    ConditionF(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{stage} failed{}: {source}", time.map(|t| format!(" at t = {t}")).unwrap_or_default())]
    Stage {
        stage: String,
        time: Option<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Stage label for checks run before any computation; failures there exit with code 2.
pub const VALIDATION_STAGE: &str = "validate";

impl Error {
    pub fn stage(stage: impl Into<String>, time: Option<f64>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            time,
            source: Box::new(source),
        }
    }

    /// Process exit code: 2 for anything rejected before computation, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Validation(_) | Error::Json(_) => 2,
            Error::Stage { stage, .. } if stage == VALIDATION_STAGE => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
