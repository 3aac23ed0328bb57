//! Dense tensors, reverse-mode differentiation, Adam, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{linear, Activation, Mlp, MlpSpec};
pub use params::{Bound, ParameterSet};
pub use tensor::{exact_sum, Tensor};
