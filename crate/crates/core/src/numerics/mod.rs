//! Numeric foundations: software bfloat16, dense tensors, deterministic RNG,
//! and the dense linear-algebra kernels every other module consumes.

mod bf16;
mod rng;
mod tensor;

pub use bf16::{bf16_round, Bf16};
pub use rng::{sample_normal, Rng};
pub use tensor::{matmul, matmul_nt, matmul_tn, Precision, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not fit {len} data elements")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds { index: Vec<usize>, shape: Vec<usize> },
    #[error("rows have unequal lengths")]
    RaggedRows,
}
