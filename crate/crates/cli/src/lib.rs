//! Experiment runner for the kvlab cache-attack laboratory: config files,
//! presets and the `run`, `sweep`, `verify-bounds` and `dump-cache`
//! commands.

pub mod commands;
pub mod config;
