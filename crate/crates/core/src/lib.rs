//! DuoFormer: a hierarchical CNN-transformer image classifier.
//!
//! A convolutional backbone produces a four-stage feature pyramid. Each stage
//! is projected to a shared embedding width and cut into the same grid of
//! patches, so every patch carries a stack of tokens drawn from all scales.
//! Scale attention mixes that stack per patch, a fused scale token summarizes
//! it, and patch attention mixes the scale tokens across the image.
//!
//! Everything runs on the small reverse-mode autodiff core in [`autograd`].

pub mod ablate;
pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scale_token;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod verify;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
