//! Command-line driver for the fedalign simulator.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_boundcheck, cmd_compare, cmd_gradcheck, cmd_partition, cmd_train};
pub use config::RunConfig;
