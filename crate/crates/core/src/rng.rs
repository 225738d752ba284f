//! Counter-based seed derivation so that every chain owns an independent,
//! scheduling-independent random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a sequence of counters into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5851_F42D_4C95_7F2D, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of the chain for `subject` in EM iteration `iteration`.
pub fn chain_seed(global: u64, subject: u64, iteration: u64) -> u64 {
    mix_seed(&[global, subject, iteration])
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
