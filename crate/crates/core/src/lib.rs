//! Round-based simulation of energy-aware decentralized learning.

pub mod config;
pub mod energy;
pub mod engine;
pub mod learning;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod sweep;
pub mod topology;
