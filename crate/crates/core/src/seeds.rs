//! Deterministic derivation of RNG streams.
//!
//! Every random stream in a fit is keyed by a tuple of integers (base seed,
//! phase, observation key, component, iteration, ...), so results never depend
//! on the order in which workers pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of keys into a single 64-bit seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// FNV-1a hash of an identifier, stable across platforms and releases.
pub fn stable_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags separating the phases of a fit.
pub mod phase {
    pub const INIT_PARTITION: u64 = 1;
    pub const INIT_EM: u64 = 2;
    pub const MAIN_EM: u64 = 3;
    pub const PER_G: u64 = 4;
    pub const MARGINAL: u64 = 5;
}
