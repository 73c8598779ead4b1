use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A gradient or loss stopped being finite. `norm` is the offending
    /// magnitude (possibly infinite or NaN).
    #[error("arithmetic overflow in {context} (norm = {norm:e})")]
    Overflow { context: String, norm: f64 },

    /// Overflow traced back to a behavioral reference density.
    #[error("non-finite {context} at state {state:?} with reference variance {ref_variance:e}")]
    KlOverflow {
        context: &'static str,
        ref_variance: f64,
        state: Vec<f64>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cholesky factorization failed after jitter {jitter:e} (smallest eigenvalue estimate {min_eigenvalue:e})")]
    Cholesky { jitter: f64, min_eigenvalue: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("demonstration generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Short machine-readable kind used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Overflow { .. } | Error::KlOverflow { .. } => "overflow",
            Error::Domain(_) => "domain",
            Error::Cholesky { .. } => "numerical",
            Error::State(_) => "state",
            Error::Parse { .. } => "parse",
            Error::Generation(_) => "generation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn is_overflow(&self) -> bool {
        matches!(self, Error::Overflow { .. } | Error::KlOverflow { .. })
    }
}
