use thiserror::Error;

#[derive(Debug, Error)]
pub enum OedError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sensor {index} at ({x}, {y}) lies outside the domain")]
    SensorOutsideDomain { index: usize, x: f64, y: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("anisotropy tensor is not symmetric positive definite")]
    NonSpdTensor,

    #[error("negative curvature encountered at CG iteration {iteration}; the Hessian is indefinite, consider Gauss-Newton mode")]
    NegativeCurvature { iteration: usize },

    #[error("dense operation on {n} unknowns exceeds the threshold {threshold}")]
    DenseThresholdExceeded { n: usize, threshold: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OedError>;
