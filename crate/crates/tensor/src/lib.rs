//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tensor`] that has a gradient-tracking input records
//! a backward rule; [`Tensor::backward`] replays them in reverse topological
//! order and accumulates gradients into the leaves created by
//! [`Tensor::param`]. Kernels are single-threaded with a fixed reduction
//! order, so results are bit-reproducible for a given input.

pub mod archive;
mod element;
mod error;
pub mod gradcheck;
pub mod init;
mod ops;
mod tensor;

pub use archive::Archive;
pub use element::{DType, Float};
pub use error::{Result, TensorError};
pub use tensor::{grad_enabled, no_grad, BackwardFn, GradTape, NoGradGuard, Tensor};
