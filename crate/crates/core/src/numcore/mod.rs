//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! Adam/AdamW, sine activations and spectral normalization.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;

pub use graph::{softplus, Gradients, Graph, Var};
pub use nn::{Access, Activation, Linear, Mlp, MlpOptions};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use spectral::{spectral_normalize, PowerIteration};
pub use tensor::Tensor;
