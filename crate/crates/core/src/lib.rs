//! Counterfactual experience augmentation for off-policy reinforcement learning.

pub mod agents;
pub mod cea;
pub mod config;
pub mod envs;
pub mod error;
pub mod kde;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod space;
pub mod sta;

pub use error::{Error, Result};
