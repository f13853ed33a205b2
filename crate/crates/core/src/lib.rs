//! Numerical core of the Excitor laboratory.
//!
//! Everything here is pure computation over owned buffers: a tape-based
//! reverse-mode autograd, a LLaMA-style decoder, the Excitor adapter (text and
//! multimodal), comparison adapters, AdamW, and synthetic instruction data.
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attention;
pub mod baselines;
pub mod data;
pub mod error;
pub mod excitor;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod multimodal;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use rng::SplitMix64;
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
