use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Failures raised at tensor operation boundaries.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value {value} at index {index} produced by {op}")]
    NonFinite { op: &'static str, index: usize, value: f64 },
    #[error("expected a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
}
