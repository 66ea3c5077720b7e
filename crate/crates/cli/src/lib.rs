//! Configuration and subcommands of the `iirsnn` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
