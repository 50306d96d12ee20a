use thiserror::Error;

/// Errors raised by the numerics, the simulator and the learners.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: ({i}, {j}) for n = {n} (requires 1 <= j <= i <= n)")]
    IndexOutOfRange { i: usize, j: usize, n: usize },

    #[error("length {0} is not a triangular number n(n+1)/2")]
    NotTriangular(usize),

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { abscissa: f64 },

    #[error("singular linear operator in {0}")]
    Singular(&'static str),

    #[error("inconsistent linear system in {context}: residual {residual:e}")]
    Inconsistent { context: &'static str, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("iteration did not converge after {iterations} steps (last change {last_change:e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("simulation blew up at t = {time}")]
    SimulationBlowUp { time: f64 },

    #[error("pair (A, B) is not stabilizable: unstable mode {re} + {im}i is uncontrollable")]
    NotStabilizable { re: f64, im: f64 },

    #[error("regression data are collinear: numerical rank {rank} < {expected} over {rows} rows")]
    Collinear {
        rank: usize,
        expected: usize,
        rows: usize,
    },

    #[error("regression matrix ill-conditioned: cond {cond:e} exceeds {limit:e}")]
    IllConditioned { cond: f64, limit: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
