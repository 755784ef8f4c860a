//! Deterministic federated-learning fleet simulator.
//!
//! The library reproduces an end-to-end federated averaging pipeline for
//! a logistic-regression triggering model: simulated devices accumulate
//! interaction caches under TTL retention, check in with a round
//! orchestrator under diurnal availability, train locally, and upload
//! anonymous updates that are averaged into the global model. The
//! analysis surface covers threshold sweeps, hourly metric buckets,
//! weight inspection, and training-vs-deployment skew comparison.
//!
//! Everything is a pure function of `(config, master seed)`.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod device;
pub mod error;
pub mod features;
pub mod fleet;
pub mod model;
pub mod rng;
pub mod server;
pub mod sim;

pub use error::{FedSimError, Result};
