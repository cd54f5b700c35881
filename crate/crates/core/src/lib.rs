//! Chance-constrained actor-critic for model-based safe control.
//!
//! The crate is organised bottom-up: [`nn`] holds the small dense networks,
//! [`env`] the car-following model, [`rollout`] batched simulation and
//! estimators, [`ccac`] the trainer, [`baselines`] the comparison methods and
//! [`harness`] configuration, experiment drivers and the CLI commands.

pub mod baselines;
pub mod ccac;
pub mod env;
pub mod error;
pub mod harness;
mod kernel;
pub mod nn;
pub mod rollout;

pub use error::{Error, Result};
