//! Dense tensors, a differentiable kernel tape, AdamW and the parameter
//! checkpoint container.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{eval_with_gradients, Bindings, Graph, Var};
pub use optim::{adamw_step, load_state, save_state, AdamWConfig, Moments, OptimState};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
