//! Seeded random numbers.
//!
//! Every stochastic step (weight init, dropout masks, shuffling, synthetic
//! profiles) draws from ChaCha8 seeded through `SeedableRng::seed_from_u64`,
//! so a seed reproduces the same stream on every platform.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a numbered sub-task (run, epoch, ...).
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng
}
