//! Dense `f64` tensors, a recording tape for reverse-mode gradients, and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{CustomOp, Graph, Var, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{logsumexp, matmul, softmax, Tensor};
