//! Batch runner behind the `trialnli` binary.
//!
//! Exit codes: 0 success, 1 invalid input or failed validation, 2 configuration
//! error (nothing was sent), 3 endpoint failure, 4 finished with failed
//! samples, 130 interrupted.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_build_store, cmd_opro, cmd_run, cmd_score, cmd_validate, Exit, Failure, RunArgs,
};
pub use config::{RunConfig, Settings};
