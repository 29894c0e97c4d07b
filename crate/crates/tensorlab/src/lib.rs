//! Dense `f64` tensors, a reverse-mode tape, gradient checking and AdamW.

mod composite;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod qmvw;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_param};
pub use params::{adamw_step, AdamWConfig, ParamStore};
pub use rng::SplitMix64;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
