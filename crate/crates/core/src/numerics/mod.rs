//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP, REL_EPS};
pub use graph::{CustomOp, Graph, Unary, Var};
pub use tensor::Tensor;

pub(crate) use tensor::softmax_row;

/// Additive mask that blocks attention from row `i` to columns `j > i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED_LOGIT;
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Large finite logit offset; `exp` of it underflows to exactly zero after
/// max subtraction.
pub const MASKED_LOGIT: f64 = -1e9;
