//! Semantic alignment of latent spaces.
//!
//! Fits at-most-affine maps between embedding spaces from a small set of
//! paired anchors, uses them to stitch a source encoder onto a linear probe
//! trained on a target space, and to classify image embeddings zero-shot by
//! translating them into a text embedding space.

pub mod cli;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod npy;
pub mod preprocess;
pub mod stitching;
pub mod store;
pub mod synthetic;
pub mod transform;
pub mod zeroshot;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere a seed is accepted.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
