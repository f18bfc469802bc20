//! The proposal verification network: a deterministic f64 tensor kernel
//! with reverse-mode gradients, the attention-based model, its losses and
//! optimizer, and the training/inference drivers.

pub mod infer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
