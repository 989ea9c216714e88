//! Core library for a chest X-ray classification pipeline built from
//! scratch: a small autodiff tensor engine, two vision-transformer
//! architectures, image decoding and augmentation, an AdamW training loop,
//! and ensemble evaluation utilities.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod fsio;
pub mod image;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod swin;
pub mod tnt;
pub mod trainer;
pub mod tensor;
