//! Dynamic pose interaction diffusion for video virtual try-on, at desk scale.
//!
//! The crate covers a synthetic articulated-figure dataset, pose conditioning,
//! hierarchical pose-aware attention, a dual-branch latent denoiser, joint
//! image-video training, sliding-window sampling and evaluation metrics.

pub mod attention;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod pose;
pub mod synthdata;
pub mod training;
pub mod util;

pub use error::{Error, Result};
