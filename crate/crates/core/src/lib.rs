//! Knowledge distillation with layer-wise learning-rate adaptation.
//!
//! Student and teacher networks are compared at their *crucial* layers (where
//! the channel or feature count changes) through attention, Jacobian or
//! Hessian maps. The Jensen–Shannon divergence between paired maps is both a
//! training loss and the signal that drives a momentum-regularized
//! per-layer learning rate.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod divergence;
pub mod engine;
pub mod experiment;
pub mod error;
pub mod maps;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod scheduler;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
