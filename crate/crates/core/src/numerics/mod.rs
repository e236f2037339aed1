//! Dense tensors, stable reductions, and a tape-based reverse-mode
//! autodiff graph.

mod functions;
mod graph;
mod mask;
mod tensor;

pub use functions::{layer_norm, log_add, log_softmax, log_sum_exp, masked_attention, softmax};
pub use graph::{backward, Activation, Gradients, Graph, Precision, Var};
pub use mask::AttentionMask;
pub use tensor::Tensor;
