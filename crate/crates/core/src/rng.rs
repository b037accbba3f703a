//! Seeded randomness.
//!
//! Every stochastic component draws from [`SimRng`] (ChaCha8), which produces
//! the same stream on every platform. Gaussian noise uses the Ziggurat
//! sampler of `rand_distr::StandardNormal`, so trajectories are reproducible
//! bit-for-bit given a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent sub-seed from a master seed and a stream index
/// (SplitMix64 finaliser over the pair).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
