//! File formats, configuration and subcommands of the `disco` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod images;
pub mod model;
