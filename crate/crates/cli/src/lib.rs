//! Command-line front end: subcommands, self-checks and the smoke pipeline.

pub mod app;
pub mod checks;
pub mod pipeline;
