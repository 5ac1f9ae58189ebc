use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension C({m}+{o}-1, {o}) overflows u64")]
    DimensionOverflow { m: usize, o: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode count mismatch: {0} vs {1}")]
    ModeMismatch(usize, usize),

    #[error("order mismatch: expected {expected}, got {got}")]
    OrderMismatch { expected: usize, got: usize },

    #[error("incompatible RDM family at order {order}: max deviation {deviation:e}")]
    Incompatible { order: usize, deviation: f64 },

    #[error("eigensolver failed to converge on a {0}x{0} matrix")]
    Eigensolver(usize),

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("infeasible correction: constraint residual {residual:e} ({rows} rows, {params} parameters)")]
    InfeasibleCorrection {
        residual: f64,
        rows: usize,
        params: usize,
    },

    #[error("config error: {0}")]
    Config(String),
}
