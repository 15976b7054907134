use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),
    #[error("duplicate vertex `{0}`")]
    DuplicateVertex(String),
    #[error("self-loop at vertex `{0}`")]
    SelfLoop(String),
    #[error("vertex index {0} out of range")]
    IndexOutOfRange(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("I - B is singular (|det| = {det:e})")]
    SingularSystem { det: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("parameter outside the graph support: {0}")]
    Support(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("weights are not a probability vector: {0}")]
    NotSimplex(String),
    #[error("weights infeasible at B: structural-zero entry of magnitude {0:e}")]
    Infeasible(f64),
    #[error("dual solution is stale: parameter changed since the inner solve")]
    StaleDual,
    #[error("empirical likelihood undefined: {0}")]
    Undefined(String),
    #[error("rank-deficient regressors for vertex `{0}`")]
    RankDeficient(String),
    #[error("singular matrix: {what} (condition number {cond:e})")]
    Singular { what: String, cond: f64 },
    #[error("root not bracketed: {0}")]
    NotBracketed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid test: {0}")]
    InvalidTest(String),
    #[error("fit did not converge: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
