//! Storage-efficient vision training on vector-quantized image tokens.
//!
//! Images are stored as bit-packed grids of codebook indices. Models train
//! directly on those grids, with token-native augmentations, masked token
//! modeling pre-training and supervised token classification.

pub mod augment;
pub mod codec;
pub mod error;
pub mod image;
pub mod model;
pub mod mtm;
pub mod nn;
pub mod rng;
pub mod tokenadapt;
pub mod toy;

pub use error::{Error, Result};
