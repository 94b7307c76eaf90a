use thiserror::Error;

/// Errors produced by the analysis toolkit.
///
/// Each variant corresponds to one failure class; [`Error::code`] returns the
/// stable machine-readable name used in structured CLI error lines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format rejected: {0}")]
    FormatRejected(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate (zero-norm) vector at {0}")]
    DegenerateVector(String),

    #[error("no tokens of modality {0}")]
    EmptyModality(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dissimilarity metric required but missing")]
    MissingMetric,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("premise failed: {0}")]
    PremiseFailed(String),

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("solver stalled: {0}")]
    SolverStalled(String),

    #[error("query token {0} not stored in attention trace")]
    MissingQuery(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),
}

impl Error {
    /// Stable upper-snake-case error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::FormatRejected(_) => "FORMAT_REJECTED",
            Error::Io(_) => "IO_ERROR",
            Error::Validation(_) => "VALIDATION_ERROR",
            Error::DegenerateVector(_) => "DEGENERATE_VECTOR",
            Error::EmptyModality(_) => "EMPTY_MODALITY",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::MissingMetric => "MISSING_METRIC",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::PremiseFailed(_) => "PREMISE_FAILED",
            Error::DomainViolation(_) => "DOMAIN_VIOLATION",
            Error::SolverStalled(_) => "SOLVER_STALLED",
            Error::MissingQuery(_) => "MISSING_QUERY",
            Error::EmptyInput(_) => "EMPTY_INPUT",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
