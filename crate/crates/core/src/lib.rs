//! Hierarchical transformers for in-context meta-reinforcement learning.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff engine over dense `f64`
//! tensors, transformer encoder stacks, the episodic memory and window
//! sampler, the hierarchical policy and its flat/recurrent baselines, a
//! family of 2D point-mass tasks, the PPO outer loop and the evaluation
//! metrics. File formats and the command-line driver live in the `htrmrl`
//! crate.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod envs;
pub mod error;
pub mod eval;
pub mod graph;
pub mod memory;
pub mod metarl;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
