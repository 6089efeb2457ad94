use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user input: bad dimensions, malformed schedules, out-of-range
    /// parameters. The message names the offending argument.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Two objects that must agree in shape (paths vs. schedule vs. problem)
    /// do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The regression normal matrix at one time step is numerically
    /// rank-deficient: the ratio of retained eigenvalues exceeds the limit.
    #[error(
        "rank-deficient regression at step {step}: condition estimate {condition:.3e} exceeds {limit:.1e}"
    )]
    RankDeficient {
        step: usize,
        condition: f64,
        limit: f64,
    },

    /// A coefficient or state evaluation produced NaN/inf at a specific
    /// (path, step).
    #[error("non-finite {what} at path {path}, step {step}")]
    NonFiniteAt {
        what: &'static str,
        path: usize,
        step: usize,
    },

    /// A scalar evaluation (outside the per-path solvers) produced NaN/inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A request would allocate beyond the configured element budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Invalid(format!("io: {e}"))
    }
}
