//! Dual-backbone fused convolutional classifier with gradient-based
//! explanations, built on a small f64 reverse-mode autodiff core.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
