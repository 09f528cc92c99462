//! Reverse-mode differentiation sufficient for MLP regression: matmul, bias,
//! relu/tanh, batch norm, dropout and the three residual penalties.

pub mod gradcheck;
mod kernels;
pub mod loss;
pub mod tape;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use loss::{loss_eval, LossKind, SMOOTH_L1_BETA};
pub use tape::{BatchMoments, Gradients, Normalization, ParamId, Tape, Var};
