//! Configuration parsing, checkpoint serialization and the train, certify,
//! account and audit subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
