use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library. Variants are grouped by the exit-code class
/// the CLI maps them to (see [`Error::is_numerical`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid domain [{lo}, {hi}]")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("t = {t} is outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("derivative order {ell} unsupported for spline order {order}")]
    UnsupportedDerivative { ell: usize, order: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("curves are not comparable: {0}")]
    IncomparableCurves(String),

    #[error("quantile level {0} must lie strictly inside (0, 1)")]
    InvalidQuantile(f64),

    #[error("collinear design columns: {}", .0.join(", "))]
    Collinear(Vec<String>),

    #[error("solver did not converge after {iterations} iterations (best objective {best_objective}, gap {gap})")]
    NoConvergence {
        iterations: usize,
        best_objective: f64,
        gap: f64,
    },

    #[error("identifier mismatch: {}", .0.join(", "))]
    IdMismatch(Vec<String>),

    #[error("missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("column `{0}` is constant")]
    ConstantColumn(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("schema error in {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularFit(_) | Error::NoConvergence { .. } | Error::Collinear(_)
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
