use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("upwind scheme requested without a direction field")]
    SchemeMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Newton diverged after {iterations} iterations (last residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("invariant density not positive: mu[{index}] = {value:e}")]
    PositivityViolated { index: usize, value: f64 },
    #[error("invariant measure is not unique on the grid (sigma_min estimate {sigma:e})")]
    NullspaceDegenerate { sigma: f64 },
    #[error("cell fixed point stalled after {iterations} iterations (last L1 increment {increment:e})")]
    FixedPointStalled { iterations: usize, increment: f64 },
    #[error("linearized corrector is not available for a local-coupling cell solution")]
    CoupledCellUnsupported,
    #[error("right-hand side is not compatible: integral = {integral:e}")]
    CompatibilityViolated { integral: f64 },
    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("query out of table range: {coordinate} = {value} not in [{lo}, {hi}]")]
    OutOfRange { coordinate: String, value: f64, lo: f64, hi: f64 },
    #[error("cell solve failed at table node {node}: {source}")]
    TableNode { node: String, source: Box<Error> },

    #[error("Picard iteration did not converge in {iterations} sweeps (last change {change:e})")]
    PicardStalled { iterations: usize, change: f64 },
    #[error("CFL violated: dt = {dt:e} exceeds {limit:e}")]
    CflViolated { dt: f64, limit: f64 },
    #[error("negative density {value:e} at node {index}, time step {step}")]
    NegativeDensity { index: usize, step: usize, value: f64 },

    #[error("too few converged points for a rate fit ({0})")]
    RateUnreliable(usize),
    #[error("coupling does not declare a primitive")]
    PrimitiveMissing,

    #[error("container format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures of an iterative method to converge (as opposed to bad input).
    pub fn is_nonconvergence(&self) -> bool {
        match self {
            Error::NewtonDiverged { .. }
            | Error::FixedPointStalled { .. }
            | Error::PicardStalled { .. }
            | Error::RateUnreliable(_) => true,
            Error::TableNode { source, .. } => source.is_nonconvergence(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
