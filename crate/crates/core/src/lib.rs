//! Wireless federated-learning simulator with per-layer adaptive PSK
//! modulation.
//!
//! The pipeline: clients train locally, measure per-layer importance via
//! Hessian top eigenvalues, pick per-layer modulation orders maximizing
//! predicted loss drop per second, then push bit-flip-corrupted updates
//! through the uplink for the server to average.

pub mod config;
pub mod data;
pub mod error;
pub mod hessian;
pub mod latency;
pub mod modem;
pub mod nn;
pub mod orchestrator;
pub mod output;
pub mod planner;
pub mod rng;

pub use error::{Error, Result};
