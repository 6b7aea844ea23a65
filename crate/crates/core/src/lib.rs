//! A convolutional classifier whose first-layer filters are generated on
//! the fly from the input image, evaluated across a configurable set of
//! image transformations whose per-branch outputs are merged by an
//! elementwise maximum. Includes the tensor/autodiff substrate, dataset
//! pipelines, and training/evaluation entry points used by the CLI.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod filtergen;
pub mod gradsuite;
pub mod network;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::Tensor;
