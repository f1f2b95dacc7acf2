//! Minimal CPU deep-learning substrate: tensors, a reverse-mode tape,
//! layers, optimizers and a checkpoint archive.
//!
//! Everything runs single-threaded in a fixed order, so a training run is
//! bitwise reproducible for a given seed.

pub mod archive;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Mode, Var};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{BufferId, ParamId, ParamStore, StoreId};
pub use tensor::Tensor;
