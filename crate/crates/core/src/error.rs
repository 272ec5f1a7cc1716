use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an input parameter was violated.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The kernel failed validation or its certified bounds are inconsistent.
    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    /// Oscillation frequency too high for the grid resolution.
    #[error("aliasing guard: oscillation n = {n} exceeds M/8 = {limit} for M = {interior} interior nodes")]
    Aliasing { n: u32, limit: usize, interior: usize },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("effective-kernel validity mask is empty (floor {floor:.3e})")]
    EmptyMask { floor: f64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("linear algebra failure: {0}")]
    Linear(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
