//! Seeding conventions: every run draws from ChaCha8 seeded by a `u64`, and
//! independent workers use distinct streams of the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `index` of `seed`; streams never overlap.
pub fn stream(seed: u64, index: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws an index from unnormalized non-negative weights.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave `u` marginally above the last bucket.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}
