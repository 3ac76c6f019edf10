//! Robust and non-robust feature distillation, four-paradigm encoder training,
//! and cross-paradigm usefulness / robustness metrics at desk scale.

pub mod attacks;
pub mod autograd;
pub mod data;
pub mod distill;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod optim;
pub mod paradigms;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
