//! Keyframe-aligned sampling, confidence routing and density selection for
//! collaborative device/edge video question answering.

pub mod backends;
pub mod bandit;
pub mod calibration;
pub mod config;
pub mod features;
pub mod harness;
pub mod pipeline;
pub mod probe;
pub mod router;
pub mod sampler;
pub mod token_ops;
pub mod types;

pub use config::{ConfigError, NetworkModel, SystemConfig};
pub use types::*;
