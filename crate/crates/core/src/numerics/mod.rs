//! Dense tensors, a gradient tape and a finite-difference oracle.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckOptions, GradCheckReport};
pub use tape::{column_max_pool, masked_row_softmax, Gradients, SoftmaxNorm, Tape, Var};
pub use tensor::Tensor2;
