//! Feed-forward Gaussian splatting from a fixed set of latent scene tokens.
//!
//! Multi-view posed images are canonicalized, embedded as patch tokens with
//! Plücker-ray camera features, and fused by dual-branch attention into a
//! fixed number of latent tokens. Each token decodes sixteen Gaussian
//! candidates that are merged into `2^s` Gaussians per token according to a
//! coarse-to-fine stage schedule, and the resulting scene is rendered by a
//! differentiable CPU splatting rasterizer.

pub mod config;
pub mod decoder;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
