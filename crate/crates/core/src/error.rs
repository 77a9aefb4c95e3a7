use thiserror::Error;

/// Every failure mode of the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "matrix is not symmetric positive definite (min eigenvalue {min_eig:e}, max {max_eig:e})"
    )]
    NotPositiveDefinite { min_eig: f64, max_eig: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("length {0} is not a triangular number d(d+1)/2")]
    InvalidSymVecLength(usize),

    #[error("invalid distribution: {0}")]
    InvalidSpec(String),

    #[error("population moments are not available in closed form for {0}")]
    IntractableMoments(String),

    #[error("empirical second-moment matrix is singular")]
    SingularEmpiricalH,

    #[error("stepsize {gamma} is not below the stability limit {limit}")]
    StepSizeTooLarge { gamma: f64, limit: f64 },

    #[error("averaging window is empty (t = {t}, T = {horizon})")]
    EmptyAverageWindow { t: usize, horizon: usize },

    #[error("need at least {needed} replicates, got {got}")]
    TooFewReplicates { needed: usize, got: usize },

    #[error("fixed-point iteration did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("linear system is singular or numerically ill-conditioned")]
    SingularSystem,

    #[error("stationary solution has a negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),

    #[error("noise covariance is zero, misspecification ratio is undefined")]
    ZeroNoise,

    #[error("config error in `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the input document rather than the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::InvalidSpec(_)
                | Error::StepSizeTooLarge { .. }
                | Error::EmptyAverageWindow { .. }
                | Error::DimensionMismatch { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::NotPositiveSemidefinite(_)
                | Error::NonFinite(_)
                | Error::IntractableMoments(_)
                | Error::TooFewReplicates { .. }
                | Error::ZeroNoise
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
