//! Explicit-modeling slice transformer for multi-solid deformation.
//!
//! Each solid, rigid body and load stream is embedded into its own set of
//! edge-augmented slice tokens. A stack of processors then models contacts
//! between solid pairs, allocates loads and contacts to every deformable
//! solid, and updates the deformable tokens; a weighted broadcast maps them
//! back onto the mesh points.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! the clock or the command line lives in the `unisoma` companion crate.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`nn`], [`optim`], [`gradcheck`]: dense `f64`
//!   tensors with reverse-mode differentiation and the layers built on them.
//! - [`scene`]: multi-solid scene data, kNN edges, load features and
//!   normalization.
//! - [`encoder`], [`processor`], [`decoder`], [`model`]: the network.
//! - [`worlds`]: a quasi-static mass-spring oracle that generates data.
//! - [`metrics`], [`train`]: losses, training loops, rollout and evaluation.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod processor;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod worlds;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
