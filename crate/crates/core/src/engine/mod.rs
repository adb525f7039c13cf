//! Dense tensors, kernels and the differentiation tape.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use conv::Conv2dOptions;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::{Tensor, MAX_RANK};
