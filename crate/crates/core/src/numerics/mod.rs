//! Dense tensors, a recording graph with reverse-mode gradients, AdamW and
//! parameter checkpoints.

pub mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::{cosine, dot, l2_norm, log_softmax_slice, normalize, softmax_rows, softmax_slice, Tensor};
