use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate element: |det M| = {det:e} below tolerance {tol:e}")]
    DegenerateElement { det: f64, tol: f64 },

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("mesh error: {0}")]
    MeshError(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("invalid quadrature order {0} (allowed range 1..=64)")]
    InvalidOrder(usize),

    #[error("integrand returned {value} at node {node:?}")]
    IntegrandError { node: Vec<f64>, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("xi-exponent mismatch for {case}: audit {audit:?}, table {table:?}")]
    ExponentMismatch {
        case: String,
        audit: Vec<i32>,
        table: Vec<i32>,
    },

    #[error("alignment error: {0}")]
    AlignmentError(String),

    #[error("wrong case: {0}")]
    WrongCase(String),

    #[error("solver error: {0}")]
    SolverError(String),

    #[error("consistency error: {0}")]
    ConsistencyError(String),

    #[error("point {0:?} lies outside the mesh")]
    OutOfDomain([f64; 3]),

    #[error("oracle unstable: {0}")]
    OracleUnstable(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
