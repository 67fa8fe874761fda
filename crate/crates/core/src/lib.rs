//! Dynamically growing tree of decoder sub-networks for lifelong video
//! object segmentation.

pub mod cli;
pub mod config;
pub mod error;
pub mod fisher;
pub mod lifelong;
pub mod metrics;
pub mod micronet;
pub mod taskgen;
pub mod tree;
pub mod tensor;

pub use error::{DgtError, Result};
pub use tensor::Tensor;
