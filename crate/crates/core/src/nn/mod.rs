//! Differentiable tensor substrate: tensors, the autodiff graph, primitive
//! layers, parameter storage, Adam, and the checkpoint codec.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod norm;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, Linear, Norm};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
