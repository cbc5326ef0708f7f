//! Command-line driver: configuration, checkpoints, the staged pipeline and
//! the synthetic fixture corpus.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod manifest;
pub mod pipeline;
pub mod synth;
