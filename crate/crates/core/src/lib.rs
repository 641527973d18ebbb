//! Diffusion-denoising out-of-distribution detection on low-dimensional data.

pub mod classifier;
pub mod detector;
pub mod error;
pub mod integrator;
pub mod interpolation;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod toy;
pub mod scorefield;

pub use error::{Error, Result};
