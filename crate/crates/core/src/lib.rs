//! Decentralized multi-agent path finding on 4-connected grids, with a
//! test-time congestion-correction layer and a seeded A/B benchmark
//! harness.
//!
//! Each agent runs an independent policy that maps a local observation
//! (obstacle, agent, and cost-to-go channels) to five action logits. The
//! correction layer in [`steam`] periodically predicts where shortest
//! paths will collide and then reroutes agents spatially (weight-map
//! penalties), discourages approach temporally (logit deltas toward
//! unavoidable bottlenecks), and damps emergent crowding every step. The
//! [`executor`] advances all agents in lockstep under deterministic
//! priority arbitration, and [`bench`] runs paired with/without
//! comparisons on identical seeds.
//!
//! Policies are either the built-in greedy cost-channel follower or an
//! external subprocess speaking line-delimited JSON (see [`external`]).

pub mod bench;
pub mod costfield;
pub mod executor;
pub mod external;
pub mod grid;
pub mod observation;
pub mod scen_gen;
pub mod steam;
mod util;
pub mod window;

pub use grid::{Action, GridMap, Scenario, Vertex};

use thiserror::Error;

/// A configuration value failed validation.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct InvalidConfig(pub String);
