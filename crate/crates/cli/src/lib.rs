//! Command-line companion to the training library: data generation and
//! loading, JSON experiment configs, binary checkpoints, CSV metrics, PGM
//! feature-map dumps, and manifests that make every run replayable.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod idx;
pub mod manifest;
pub mod metrics_csv;
pub mod pgm;
pub mod synth;
