//! Command-line front end: pipeline steps that read a TOML run config and
//! write checkpoints, CSV reports and SVG plots.

pub mod commands;
pub mod pipeline;
pub mod plot;

pub use commands::run;
