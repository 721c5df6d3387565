//! Linear-algebra kernels shared by every stage of the pipeline.

mod gemm;
mod kmeans;
mod kron;
mod solve;

pub use gemm::{matmul, matmul_at_b, matmul_a_bt};
pub use kmeans::{kmeans, kmeans_best_of, kmeans_objective, KMeans};
pub use kron::{block_diag, kronecker};
pub use solve::{cholesky, spd_solve, SpdSystem};
