//! Seeded random streams. Every stochastic step takes an explicit seed so
//! runs are reproducible; independent streams are derived with SplitMix64.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type Rng = Pcg64;

pub fn rng_from_seed(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

/// One SplitMix64 step; used to derive child seeds from a parent.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed for `(parent, stream)` that is stable across releases.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
