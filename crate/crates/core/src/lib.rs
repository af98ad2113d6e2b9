//! Shadow removal with region-aware normalisation and soft-mask-guided
//! attention, plus the data, training and evaluation machinery around it.

pub mod colorspace;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod saat;
pub mod selftest;
pub mod soan;
pub mod train;

pub use error::{Error, Result};
