use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the library.
///
/// The variants split into three families that the runner maps to exit codes:
/// rejected input (`DimensionMismatch`, `NonUniformGrid`, `Config`), numerical
/// breakdown (`SingularResolvent`, `StepSingular`, `Contour`) and violated
/// mathematical hypotheses (`Domain`, `KernelNotBv`, `Precondition`,
/// `Hypothesis`).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("resolvent is singular at lambda = {lambda}: lambda lies in the spectrum")]
    SingularResolvent { lambda: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel not BV: {0}")]
    KernelNotBv(String),

    #[error("implicit step is singular at t = {t}")]
    StepSingular { t: f64 },

    #[error("grid is not uniform: {0}")]
    NonUniformGrid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("laplace inversion failed: {0}")]
    Contour(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors that stem from a violated hypothesis of the theory
    /// (or a numerical breakdown) rather than a malformed request.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularResolvent { .. }
                | Error::Domain(_)
                | Error::KernelNotBv(_)
                | Error::StepSingular { .. }
                | Error::Precondition(_)
                | Error::Hypothesis(_)
                | Error::Contour(_)
        )
    }
}
