use thiserror::Error;

/// Errors produced by the numerical kernels and the federation layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge within {0} sweeps")]
    EigenNoConvergence(usize),

    #[error("inconsistent system: residual {residual:e} exceeds {tol:e}")]
    InconsistentSystem { residual: f64, tol: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty update list")]
    EmptyUpdates,

    #[error("{0} requires a Fisher sketch on every update")]
    MissingSketch(&'static str),

    #[error("dense curvature path limited to p <= {cap}, got p = {p}")]
    DenseCapExceeded { p: usize, cap: usize },

    #[error("stacked sketch rank {r_tot} exceeds cap {cap}")]
    StackedRankExceeded { r_tot: usize, cap: usize },

    #[error("sketch subspace collapsed after {0} restarts")]
    SketchBreakdown(usize),

    #[error("operation unsupported: {0}")]
    Unsupported(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
