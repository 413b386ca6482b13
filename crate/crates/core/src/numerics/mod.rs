//! Dense arithmetic, symmetric eigendecomposition and seeded sampling.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{
    complete_orthonormal, gram, l2_norm, matmul, orthonormality_error, sym_eigen, EigenResult, JACOBI_MAX_SWEEPS,
    JACOBI_OFF_DIAGONAL_TOL,
};
pub use rng::{gauss_sample, uniform_sample, RngState};
pub use tensor::Tensor;
