//! Library side of the `vpt` binary: config parsing plus the subcommand
//! implementations, exposed for integration tests.

pub mod commands;
pub mod config;
