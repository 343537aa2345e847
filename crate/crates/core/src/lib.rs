//! Offline goal-conditioned policy learning with skill-step latent models.

mod error;

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod expert;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod policy;
pub mod probe;
pub mod rollout;
pub mod shift;
pub mod train;

pub use error::{Error, Result};
