//! Robust blind image watermarking in the deep-feature space of an image's
//! low-frequency component.
//!
//! The pipeline decomposes an image with a circular FFT low-pass mask, maps
//! the low band into a 4-channel latent space with a frozen autoencoder,
//! fuses a binary message into that latent with a trainable two-branch
//! residual network, decodes, and recombines with the untouched high band.
//! Extraction re-derives the low band from the (possibly attacked) image and
//! decodes the message with a trainable extraction network. Training never
//! applies an attack: robustness comes from the measured stability of
//! low-frequency components.

pub mod attacks;
pub mod checkpoint;
pub mod codec;
pub mod embednet;
pub mod error;
pub mod extractnet;
pub mod filters;
pub mod freq;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod stability;
pub mod synth;
pub mod trainer;
pub mod watermark;

pub use error::{Error, Result};
pub use image::Image;
pub use watermark::WatermarkBits;
