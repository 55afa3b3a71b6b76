//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{ChamferKind, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{decayed_lr, AdamW, AdamWConfig};
pub use params::{ParamStore, INIT_SCHEME};
pub use tensor::Tensor;
