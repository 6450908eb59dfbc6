//! File formats, dataset adapters and the `magloc` command line on top of
//! `magloc-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod images;
pub mod outputs;
pub mod stacks;
pub mod trials;

pub use error::{CliError, Result};
