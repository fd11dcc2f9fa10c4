//! Desk-scale laboratory for learned inter-agent communication in a
//! predator-prey team game.
//!
//! Two predators each chase a secretly assigned prey; only the teammate
//! knows the assignment, so the predators must learn to talk. The crate
//! bundles everything needed to study that end to end:
//!
//! - [`diffnet`]: dense networks with exact reverse-mode gradients
//!   (including input gradients, so a loss can cross the message channel),
//!   Adam, and finite-difference verification.
//! - [`env`](mod@env): the deterministic 2-vs-2 particle arena with distance-based,
//!   zero-sum team rewards and per-mode observations.
//! - [`agents`]: message and action networks for the predators, the
//!   independent Q-network used by prey (and by predators when
//!   communication is disabled), epsilon-greedy selection.
//! - [`training`]: epoch-based rollouts and TD updates, with gradients
//!   flowing through the live message channel and strict detachment at the
//!   team boundary.
//! - [`metrics`]: smoothing, peak/aggregate statistics, and the
//!   message-vs-target confusion matrix.
//! - [`cli`]: seeded multi-run experiment orchestration.

pub mod agents;
pub mod cli;
pub mod diffnet;
pub mod env;
pub mod metrics;
pub mod training;

mod error;

pub use error::{Error, Result};
