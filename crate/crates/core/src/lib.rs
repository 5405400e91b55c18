//! Tiered model routing with calibrated escalation, router and portfolio
//! co-optimization, and queueing latency analysis over a synthetic workload.

pub mod calibration;
pub mod cascade;
pub mod config;
pub mod coopt;
pub mod error;
pub mod experiment;
pub mod latency;
pub mod portfolio;
pub mod rng;
pub mod router;
pub mod workload;

pub use error::{Error, Result};
