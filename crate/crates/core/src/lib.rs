//! GAN-based x4 single-image super-resolution with semantic-aware
//! discriminators.
//!
//! The discriminator is conditioned on pixel-wise semantic features of the
//! ground-truth image, extracted by a frozen pretrained backbone and fused
//! into the discriminator through a cross-attention block in which the
//! semantics form the query and the image features form keys and values.
//! The crate provides the fusion block, patch/pixel/image-wise conditioned
//! discriminators plus their unconditioned baselines, RRDB generators, the
//! three-term training objective, a paired-data pipeline, the adversarial
//! training loop, and PSNR/SSIM evaluation. Everything runs deterministically
//! on CPU at desk scale; see README for the CLI.

pub mod data;
pub mod disc;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod sefb;

pub use error::{Error, Result};
