//! Federated training with pluggable local backward passes.

pub mod data;
pub mod error;
pub mod federation;
pub mod feedback;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Activation, Mlp};
