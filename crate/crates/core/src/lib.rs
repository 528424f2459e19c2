//! Gradient-free reinforcement learning with in-context regressors.
//!
//! Q-functions are produced by fitted Q iteration in which every "fit" only
//! swaps the regressor's context. Experience lives in a budgeted context
//! buffer whose overflow is handled by a pluggable truncation operator.

pub mod agent;
pub mod context;
pub mod envs;
pub mod error;
pub mod fqi;
pub mod harness;
pub mod regressor;
pub mod transition;

pub use error::{Error, Result};
