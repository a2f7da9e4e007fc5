//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `u64` seed and builds its own
//! ChaCha8 stream from it. Independent sub-streams (episodes, shards, stages)
//! derive their seeds from a root seed with [`derive_seed`]:
//! `seed_i = root XOR splitmix64(i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the `index`-th independent sub-stream of `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    root ^ splitmix64(index)
}
