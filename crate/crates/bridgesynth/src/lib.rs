//! Slice-consistent Brownian bridge diffusion for CT contrast synthesis.
//!
//! The library translates non-contrast CT volumes into synthetic
//! contrast-enhanced volumes with a Brownian bridge diffusion model whose
//! reverse process is kept coherent across slices by style-key conditioning
//! and inter-slice trajectory alignment. It ships the full desk-scale
//! pipeline: phantom data generation, preprocessing, training, sampling and
//! evaluation, all reachable from the `bridgesynth` CLI.

pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod sampler;
pub mod schedule;
pub mod stylekey;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
