//! Files, datasets and the command line around [`unisoma_core`].
//!
//! - [`scene_io`]: scene and trajectory files (JSON header + `f64` payload).
//! - [`dataset`]: generated dataset directories with split manifests.
//! - [`certify`]: independent re-check of oracle equilibria.
//! - [`checkpoint`]: model checkpoints.
//! - [`config`]: TOML configuration with command-line overrides.
//! - [`suites`]: identity and gradient-check suites.
//! - [`commands`], [`cli`]: the `unisoma` binary.

pub mod certify;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod scene_io;
pub mod suites;

pub use error::{Error, Result};
