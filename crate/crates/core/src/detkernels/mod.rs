//! Deterministic, batch-invariant numeric kernels.
//!
//! Every kernel is parameterised by an [`ExecutionProfile`]: the reduction
//! order, the matmul tile length and the effective precision of operands and
//! partials. Identical inputs under identical profiles give bitwise identical
//! outputs, and per-row kernels never let the batch size influence a row.
//! Mismatch between a "rollout" and a "training" engine is modelled as the
//! same kernels run under two different profiles.

mod kernels;
mod matrix;
mod precision;
mod reduce;

#[doc(hidden)]
pub use kernels::KernelFault;
pub use kernels::{log_softmax_bi, matmul_bi, rmsnorm_bi, ExecutionProfile};
pub(crate) use kernels::{log_softmax_row, rmsnorm_row};
pub use matrix::Matrix;
pub use precision::{quantize, PrecisionMode, MAX_MANTISSA_BITS, MIN_MANTISSA_BITS};
pub use reduce::{det_sum, ReductionOrder};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("value {value} overflows {precision}")]
    Overflow { value: f64, precision: PrecisionMode },
    #[error("shape mismatch: {}x{} times {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("log-softmax over an empty row")]
    EmptyRow,
    #[error("rmsnorm eps must be positive, got {0}")]
    InvalidEps(f64),
    #[error("mantissa bits must be in [{MIN_MANTISSA_BITS}, {MAX_MANTISSA_BITS}], got {0}")]
    InvalidPrecision(u32),
    #[error("block size must be at least 1")]
    InvalidBlockSize,
    #[error("tile must be at least 1")]
    InvalidTile,
    #[error("{0}")]
    Parse(String),
}

impl KernelError {
    pub(crate) fn offset_index(self, offset: usize) -> Self {
        match self {
            KernelError::NonFinite { index, value } => KernelError::NonFinite { index: index + offset, value },
            other => other,
        }
    }
}
