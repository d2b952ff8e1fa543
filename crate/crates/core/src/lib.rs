//! Numerical laboratory for multi-positive contrastive losses.
//!
//! The crate implements two softmax-style contrastive objectives over batches
//! with multiple positives per anchor — the supervised contrastive (SupCon)
//! loss and the tuned contrastive (TCL) loss with its `k1`/`k2` denominator
//! scalars — together with their exact closed-form gradients, a gradient
//! decomposition lab for hard-positive / hard-negative analysis, synthetic
//! datasets with view augmentation, and a small MLP trainer with a linear
//! probe for representation quality.
//!
//! Everything is `f64`, deterministic given an explicit seed, and free of
//! global RNG state.

pub mod data;
pub mod gradlab;
pub mod losses;
pub mod numerics;
pub mod trainer;
pub mod verify;

pub use losses::{ContrastiveBatch, LossKind, LossParams, LossResult};
pub use numerics::{Embedding, Vector};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide deterministic RNG. ChaCha8 streams are stable across
/// platforms, so a seed fully determines every run.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
