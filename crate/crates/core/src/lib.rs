//! Adversarial batch representation augmentation (ABRA) and its baselines on
//! a small self-contained autograd engine.

pub mod abra;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
