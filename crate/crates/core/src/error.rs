use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("invalid source data: {0}")]
    InvalidSource(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("elliptic solver did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },
    #[error("time step underflow (dt = {0:.3e}); state is too stiff for explicit stepping")]
    StepUnderflow(f64),
    #[error("brute-force minimum not reproduced: best {best:.12e}, only {matches} of {starts} starts within tolerance")]
    NonReproducible {
        best: f64,
        matches: usize,
        starts: usize,
    },
    #[error("operation requires a one-dimensional grid")]
    NotOneDimensional,
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
