//! Minimal differentiable substrate: tensors, a reverse-mode trace, the
//! five layer types, Adam and finite-difference gradient checks.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{AdditiveAttention, Dense, GruCell, LstmCell, Mlp};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
