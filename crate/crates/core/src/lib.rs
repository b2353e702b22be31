//! Service placement and migration for MEC-enabled vehicular networks.
//!
//! The crate bundles a highway mobility and radio simulator, the exact
//! latency-plus-migration cost model with an exact dynamic-programming
//! solver and an LP exporter, a multi-agent environment, a small
//! fully connected network engine, and independent double-DQN agents
//! coordinated by a central controller.

pub mod cli;
pub mod dql;
pub mod env;
pub mod error;
pub mod harness;
pub mod model;
pub mod mobility;
pub mod neural;
pub mod solver;

pub use error::{Error, Result};
