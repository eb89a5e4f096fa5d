//! Library surface of the CLI: configuration, run-directory IO, commands,
//! and SVG rendering. The binary in main.rs is a thin dispatcher over this.

pub mod commands;
pub mod config;
pub mod error;
pub mod runio;
pub mod svg;
