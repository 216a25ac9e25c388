//! Dense arrays, differentiable primitives, and reverse-mode gradients.

mod check;
mod tape;
mod tensor;

pub use check::{check_grad, finite_diff_check};
pub use tape::{Tape, Var};
pub use tensor::{cosine, cosine_matrix_plain, dot, l2_norm, matmul_plain, Real, Tensor};
