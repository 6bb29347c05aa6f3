//! Dense kernels, a reverse-mode tape, and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use gradcheck::{finite_diff_check, perturb_trainable, FdOptions, GradCheckReport, TensorCheck};
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use kernels::{attention, layer_norm, softmax_rows};
pub use tensor::Tensor2;
