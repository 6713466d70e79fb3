//! Simulator for a depthwise-separable convolution accelerator.

pub mod design;
pub mod error;
pub mod fixedpoint;
pub mod functional;
pub mod memory;
pub mod mme;
pub mod network;
pub mod scheduler;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
