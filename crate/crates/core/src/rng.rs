//! Seeded randomness. Every random draw in the crate flows through an
//! explicitly seeded ChaCha stream so runs are reproducible bit-for-bit.

use alloc::vec::Vec;

pub use rand::Rng;
pub use rand::SeedableRng;

/// The one RNG used everywhere. ChaCha12 has a stable, portable output
/// stream and supports cheap save/restore of its word position.
pub type SeededRng = rand_chacha::ChaCha12Rng;

pub fn from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Standard-normal draws, in order.
pub fn normal_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}
