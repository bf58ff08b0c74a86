use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell count {n_t}x{n_x}x{n_y} overflows the index type")]
    Overflow { n_t: usize, n_x: usize, n_y: usize },
    #[error("scale {scale} is not resolvable on the grid: {reason}")]
    UnresolvableScale { scale: f64, reason: String },
    #[error("grid mismatch between fields")]
    GridMismatch,
    #[error("ellipticity violated at site {site}: eigenvalues ({min_eig}, {max_eig}) outside [{lambda}, 1]")]
    EllipticityViolation {
        site: usize,
        min_eig: f64,
        max_eig: f64,
        lambda: f64,
    },
    #[error("region contains {found} nodes, need at least {needed}")]
    EmptyRegion { found: usize, needed: usize },
    #[error("singular or non-positive matrix (det = {0})")]
    SingularMatrix(f64),
    #[error("no heat-kernel bound found on the candidate grid")]
    NoBoundFound,
    #[error("quadrature failed to reach tolerance {tolerance} within {evaluations} evaluations")]
    QuadratureFailure { tolerance: f64, evaluations: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degree {degree} exceeds the budget {max}")]
    DegreeTooLarge { degree: usize, max: usize },
    #[error("rank {rank} exceeds the budget {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("test-function support escapes the grid: {0}")]
    SupportEscapesGrid(String),
    #[error("linear solve did not converge: residual {residual} after {iterations} iterations")]
    LinearSolveFailure { residual: f64, iterations: usize },
    #[error("wall-time budget of {budget_seconds} s exceeded")]
    BudgetExceeded { budget_seconds: f64 },
    #[error("need at least {needed} distinct points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("ledger corrupt at line {line}: {reason}")]
    LedgerCorrupt { line: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
