//! Dense 64-bit numerics with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, Reduction, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{argmax, Tensor};
