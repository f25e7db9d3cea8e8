use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("unsupported polynomial degree {0} (supported: 1, 2, 3)")]
    UnsupportedDegree(usize),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value {value} at dof {dof}")]
    NonFinite { dof: usize, value: f64 },

    #[error("conjugate gradients did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("solution blew up at t = {t}: ||u||_inf = {linf:e}")]
    BlowUp { t: f64, linf: f64 },

    #[error("weight decay assumption violated: max weight {max_phi:e} on rough region exceeds {bound:e} (h = {h})")]
    WeightDecay { max_phi: f64, bound: f64, h: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
