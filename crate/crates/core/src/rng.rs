//! Named, independently reproducible random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Monte Carlo noise inside training iterations.
    Training = 2,
    /// Synthetic data generation.
    Sampling = 3,
    /// Baseline network initialization and training.
    Baseline = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
