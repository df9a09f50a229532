//! Self-supervised denoising for scanning-probe and electron microscopy
//! images: a blind-spot U-Net trained on a composite pixel + Fourier-magnitude
//! objective, goal-specific preprocessing, spectral and line-artifact
//! metrics, and a synthetic quasiparticle-interference generator.

pub mod error;
pub mod fft;
pub mod filters;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod patch;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{load_image, save_image, BitDepth, GrayImage};
pub use par::Exec;
