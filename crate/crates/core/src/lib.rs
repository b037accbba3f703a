//! Simulation and decision-making toolkit for containers sharing a single
//! processing unit (PU).
//!
//! The crate is organised bottom-up:
//!
//! - [`env`]: the discrete-time facility simulator (stochastic fill, PU busy
//!   time, overflow, collision bookkeeping).
//! - [`reward`]: the three reward regimes used by the training curriculum.
//! - [`nn`], [`ppo`], [`curriculum`]: a small actor-critic, clipped-surrogate
//!   PPO updates and the phase schedule (freezing, tightened KL limit).
//! - [`collision_data`], [`collision_model`]: Monte Carlo pair rollouts and a
//!   gradient-boosted tree classifier trained on them.
//! - [`inference`]: the no-op override rule combining policy and classifier.
//! - [`eval`], [`experiment`]: seeded evaluation, metrics and reports.

pub mod collision_data;
pub mod collision_model;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod nn;
pub mod ppo;
pub mod reward;
pub mod rng;

pub use error::{Error, Result};
