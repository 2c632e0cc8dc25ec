use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input, bad config, unparseable file.
    Validation,
    /// A mathematical precondition failed (gap, cap, singular system, ...).
    Math,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {diff:e}")]
    Asymmetric { i: usize, j: usize, diff: f64 },
    #[error("matrix is not positive semidefinite (lambda_min = {lambda_min:e})")]
    NotPsd { lambda_min: f64 },
    #[error("eigensolver did not converge (off-diagonal residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("non-positive spectral gap {gap:e}: delta must be below the eigenvalue floor")]
    NonPositiveGap { gap: f64 },
    #[error("degenerate spectrum: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sample size cap exceeded: {0}")]
    CapExceeded(String),
    #[error("delta too large: lower confidence bound {lcb:e} does not clear delta {delta:e}")]
    DeltaTooLarge { lcb: f64, delta: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sample source exhausted: requested {requested} rows, {available} left")]
    Exhausted { requested: usize, available: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NoConvergence { .. }
            | Error::NonPositiveGap { .. }
            | Error::Degenerate(_)
            | Error::Domain(_)
            | Error::CapExceeded(_)
            | Error::DeltaTooLarge { .. }
            | Error::Singular(_)
            | Error::Exhausted { .. } => ErrorClass::Math,
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
