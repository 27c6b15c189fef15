//! Energy-aware edge association for clustered personalized federated learning.
//!
//! The crate simulates a multi-cell wireless system in which a cloud-side
//! double dueling deep Q-network assigns users to base stations, each base
//! station splits its uplink bandwidth with a closed-form KKT allocation, and
//! every station trains a personalized model for its cluster. Users whose
//! accuracy falls behind their cluster keep a local personalization head
//! while still sharing the base layers.
//!
//! Module map, bottom-up:
//!
//! - [`scenario`]: placement, Rayleigh channels, configuration.
//! - [`comms`]: uplink rate, upload energy, the accuracy/energy objective.
//! - [`bandwidth_opt`]: closed-form per-station allocation, KKT checks,
//!   numeric oracle, proportional baseline.
//! - [`learnkit`]: dense networks, backprop, SGD, gradient checking.
//! - [`fl_engine`]: label-swap data, local SGD, aggregation, transfer.
//! - [`drl_agent`]: MDP encoding, replay, D3QN / DQN learner, checkpoints.
//! - [`strategies`]: benchmark associations and the brute-force optimum.
//! - [`harness`]: the epoch loop, sweeps and CSV telemetry.

pub mod bandwidth_opt;
pub mod comms;
pub mod drl_agent;
pub mod fl_engine;
pub mod harness;
pub mod learnkit;
pub mod rng;
pub mod scenario;
pub mod strategies;

mod error;

pub use error::{Error, Result};
