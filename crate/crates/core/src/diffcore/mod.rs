//! Minimal differentiable compute layer: a dense matrix type, primitives
//! with analytic backward passes, a parameter store with Adam, and a
//! finite-difference gradient checker.

pub mod fdcheck;
pub mod ops;
pub mod params;
pub mod tensor;

pub use fdcheck::fd_check;
pub use ops::{Gradients, Primitive};
pub use params::{AdamConfig, Param, ParamStore};
pub use tensor::Tensor2;
