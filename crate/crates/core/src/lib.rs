//! Lifted linear models with certified tracking controllers and
//! conformally calibrated error bounds.

pub mod conformal;
pub mod contraction;
pub mod controller;
pub mod dubins;
pub mod error;
pub mod harness;
pub mod koopman_id;
pub mod lifting;
pub mod linalg;
pub mod matrix_serde;
pub mod rollout;
pub mod seeds;

pub use error::{Error, Result};
