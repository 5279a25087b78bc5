//! Command-line pipeline: prepare, train, calibrate, evaluate, predict and
//! report, driven by a single JSON run configuration.

pub mod cli;
pub mod commands;
pub mod config;

pub use cli::{run, Cli};
pub use config::{Layout, Overrides, RunConfig};
