//! Library surface of the command-line harness: run configuration,
//! command implementations, and plot emission. The binary in `main.rs`
//! is a thin argument-parsing layer over this.

pub mod commands;
pub mod config;
pub mod svg;

pub use config::RunConfig;
