//! Particle and sigma-point filters for a dual-sensor range-bearing tracker in
//! which a low-noise source sensor transfers its predicted observation to a
//! high-noise primary sensor.

pub mod config;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod math;
pub mod models;
pub mod output;
pub mod particle;
pub mod rng;
pub mod selftest;
pub mod transfer;

pub use error::{FilterError, Result};
pub use harness::{run_experiment, ExperimentResult, FilterSpec, RunMetrics, ScenarioConfig};
pub use particle::{ParticleSet, StateGaussian};
pub use transfer::TransferPacket;
