//! Dense arrays, the seeded generator, elementary differentiable operations
//! and the finite-difference gradient checker.

mod array;
mod gradcheck;
mod ops;
mod rng;

pub use array::{dot, DenseArray};
pub use gradcheck::{finite_diff_check, finite_diff_check_subspace, GradCheckReport, FD_STEP};
pub(crate) use ops::{gemm_nn, gemm_nt, gemm_tn};
pub use ops::{
    cosine_distance, cosine_distance_backward, cosine_similarity, cosine_similarity_backward,
    log_sum_exp, matmul, matmul_backward, sigmoid, sigmoid_derivative, softmax, softmax_backward,
};
pub use rng::Rng;
