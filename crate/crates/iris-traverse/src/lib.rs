//! Gradient-guided latent-space traversal for differentiable iris-image
//! decoders.
//!
//! The crate is organized in layers, each usable on its own:
//!
//! - [`autodiff`] — a small reverse-mode engine on f64 tensors (the only
//!   numeric substrate used anywhere else);
//! - [`decoders`] — differentiable latent → image generators (a procedural
//!   renderer with analytically known geometry, and a small convolutional
//!   one), plus weight-file I/O;
//! - [`geometry`] — differentiable estimators for pupil/iris circles and
//!   eyelid opening, and polar normalization;
//! - [`attributes`] — scalar attribute readouts (sharpness) and the
//!   attribute/mask/identity loss terms combined by the traversal;
//! - [`identity`] — Gabor-bank identity descriptor, binary iris codes and
//!   Hamming comparison;
//! - [`traversal`] — Adam/AdamW latent optimization loops (`traverse`,
//!   `invert`) producing trajectories;
//! - [`harness`] — experiment matrix runner, CSV/JSONL emission, summary
//!   statistics;
//! - [`imageio`] / [`config`] — PGM/PNG image I/O and TOML run
//!   configuration.

pub mod attributes;
pub mod autodiff;
pub mod config;
pub mod decoders;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod identity;
pub mod imageio;
pub mod traversal;

pub use error::{Error, Result};
