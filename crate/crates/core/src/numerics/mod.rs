//! Dense tensors, a reverse-mode graph, and the pieces built on it.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, Activation, Gradients, Graph, Param, ParamId, ParamStore, Var, BCE_CLAMP};
pub use ops::{matmul, mlp_forward, scaled_dot_attention, softmax_rows, DenseLayer, Mlp};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
