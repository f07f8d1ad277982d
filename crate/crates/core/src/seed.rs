//! Seed derivation for independent, reproducible random streams.
//!
//! Every random stream in the simulator (data generation, partitioning,
//! client sampling, local shuffling, privacy noise, codec init) is drawn
//! from a `ChaCha8Rng` whose seed is derived from the experiment seed and
//! a fixed path of labels. Streams never share state, so the order in
//! which clients run cannot change what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Values are arbitrary but frozen: changing one changes
/// every artifact produced under that label.
pub mod stream {
    pub const DATA: u64 = 0x6461_7461;
    pub const PARTITION: u64 = 0x7061_7274;
    pub const SAMPLE: u64 = 0x7361_6d70;
    pub const LOCAL: u64 = 0x6c6f_6361;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const MODEL: u64 = 0x6d6f_6465;
    pub const CODEC: u64 = 0x636f_6465;
    pub const SPLIT: u64 = 0x7370_6c69;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const CHANNEL: u64 = 0x6368_616e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`, one component at a time.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
