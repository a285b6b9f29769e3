//! Desk-scale post-training quantization engine for Mixture-of-Experts
//! models: expert-aware smoothing aggregation, router logits distribution
//! alignment, and expert-level calibration data balancing, exercised on
//! deterministic synthetic models.

pub mod error;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
