//! Dense tensor arithmetic with reverse-mode differentiation, a
//! finite-difference oracle, and instrumentation counters.

pub mod gradcheck;
pub mod ops;
pub mod profile;
pub mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use ops::{
    concat_cols, concat_rows, conv1d_depthwise, cross_entropy_logits, elementwise, linear,
    rms_normalize, ElementwiseOp,
};
pub use tensor::{grad_enabled, no_grad, Tensor};
