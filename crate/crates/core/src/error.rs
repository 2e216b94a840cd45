use thiserror::Error;

/// Errors raised by the numerical kernels, filters and the experiment harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("matrix is not positive definite (Cholesky failed after jitter)")]
    NonPositiveDefinite,

    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("every log-weight is -inf or NaN")]
    AllWeightsDegenerate,

    #[error("invalid resampling weights: {0}")]
    InvalidWeights(String),

    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("range-bearing measurement is undefined at the sensor origin")]
    OriginSingularity,

    #[error("transfer packet is for step {packet_step}, filter is at step {filter_step}")]
    StaleTransferPacket { packet_step: usize, filter_step: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed packet file at line {line}: {reason}")]
    PacketFormat { line: usize, reason: String },
}

impl FilterError {
    /// True for failures caused by user input (configuration, files) rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            FilterError::InvalidConfig(_)
                | FilterError::Io(_)
                | FilterError::PacketFormat { .. }
                | FilterError::LengthMismatch { .. }
        )
    }
}

impl From<std::io::Error> for FilterError {
    fn from(e: std::io::Error) -> Self {
        FilterError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FilterError>;
