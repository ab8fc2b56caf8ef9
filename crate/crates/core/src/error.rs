use thiserror::Error;

/// Errors raised across the stacking library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("{what} is singular or near-singular (reciprocal condition {rcond:.3e})")]
    Singular { what: &'static str, rcond: f64 },

    #[error("sum of the unnormalized weight direction is zero; cannot rescale to sum {m}")]
    ZeroDirectionSum { m: f64 },

    #[error("m must be nonzero")]
    ZeroConstraint,

    #[error("closed form disagrees with the KKT solve by {max_diff:.3e} (tolerance {tol:.1e})")]
    OracleDisagreement { max_diff: f64, tol: f64 },

    #[error("leverage of row {row} is {leverage}; the point determines its own fit")]
    UnitLeverage { row: usize, leverage: f64 },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no bandwidth in the grid gives defined leave-one-out predictions")]
    NoValidBandwidth,

    #[error("kernel matrix is not positive definite after jitter {jitter:.1e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("zero-norm candidate column {column}")]
    ZeroNormColumn { column: usize },

    #[error("basis generation exceeded {rounds} rounds; last rejection: {last}")]
    BasisRoundsExceeded { rounds: usize, last: String },

    #[error("candidate generation failed after {attempts} attempts: {last}")]
    GeneratorExhausted { attempts: usize, last: String },

    #[error("surface area is only defined for 1- and 2-dimensional inputs, got {0}")]
    UnsupportedDimension(usize),

    #[error("quadrature did not converge: estimated error {estimate:.3e}")]
    Quadrature { estimate: f64 },

    #[error("variable '{variable}': {source}")]
    Variable {
        variable: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attaches a variable name, as the pipeline does for per-variable failures.
    pub fn for_variable(self, variable: &str) -> Self {
        Error::Variable {
            variable: variable.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
