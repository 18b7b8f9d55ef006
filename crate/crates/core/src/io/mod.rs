//! Configuration, artifact persistence and the batch commands.

pub mod commands;
pub mod config;
pub mod solution;

pub use commands::{cmd_check, cmd_oracle, cmd_simulate, cmd_solve, cmd_verify, CommandOutput, PolicyChoice};
pub use config::RunConfig;
