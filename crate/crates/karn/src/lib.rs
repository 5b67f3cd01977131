//! Data pipeline, file formats and command implementations around
//! [`karn_core`].
//!
//! * [`series`] and [`features`]: hourly CSV ingestion and calendar features.
//! * [`synth`]: deterministic synthetic load profiles.
//! * [`container`], [`checkpoint`], [`prepare`]: the versioned binary
//!   container, model checkpoints and cached prepared splits.
//! * [`config`]: the flat TOML run configuration.
//! * [`search`]: parallel resumable grid search.
//! * [`commands`]: one function per CLI command.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod prepare;
pub mod report;
pub mod search;
pub mod series;
pub mod synth;

pub use error::{Error, ExitClass, Result};
