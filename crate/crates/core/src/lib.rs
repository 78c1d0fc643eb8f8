//! Group-wise lookup-free quantization (GQ) tokenizer toolkit.
//!
//! * [`autodiff`]: small reverse-mode AD engine used by every model and loss.
//! * [`quantizer`]: channel grouping, sign quantization, token ids, straight-through estimator.
//! * [`entropy`]: grouped token/codebook entropy losses and an exhaustive oracle.
//! * [`model`]: desk-scale encoder, (generative) decoder and patch discriminator.
//! * [`trainer`]: two-stage training loop, codebook usage, EMA.
//! * [`codec`]: `.wtok` token bitstream and compression-ratio accounting.
//! * [`metrics`]: PSNR / SSIM / MSE.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
