use std::fmt;

/// Location of a grid node, used in solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRef {
    pub state: String,
    pub tau: f64,
    pub y: f64,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {} at tau = {}, y = {}", self.state, self.tau, self.y)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("name index {index} out of range for {n} names")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid model: {0}")]
    InvalidSpec(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("volatility matrix is singular or ill-conditioned at y = {y}")]
    SingularVolatility { y: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("jump-control solve failed at {node}: residual {residual:e}")]
    HhatNonConvergence { node: NodeRef, residual: f64 },

    #[error("tridiagonal solve failed: zero pivot at row {row}")]
    Tridiagonal { row: usize },

    #[error("bound violation at {node}: f = {value}, bounds [{lower}, {upper}]")]
    BoundViolation {
        node: NodeRef,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("missing solution for state {0}")]
    MissingState(String),

    #[error("fixed-point iteration failed: {0}")]
    FixedPoint(String),

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
