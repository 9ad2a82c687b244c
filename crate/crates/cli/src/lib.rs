//! Library side of the `warpsynth` command-line tool.

pub mod commands;
pub mod config;
pub mod fail;
pub mod manifest;
pub mod stats;
