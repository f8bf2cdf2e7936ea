//! Dense storage, multiply kernels, activations and the seeded generator.

mod activation;
mod kernels;
mod matrix;
mod rng;
mod scalar;

pub use activation::{sigmoid, tanh_act};
pub use kernels::{gemm, gemm_reference, gemm_tiled, gemm_tiled_seq, gemv, gemv_tiled, Tiles};
pub use matrix::{Matrix, Vector};
pub use rng::{uniform_weight, Rng64};
pub use scalar::{Precision, Scalar};
