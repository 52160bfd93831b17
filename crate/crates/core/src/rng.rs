//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a root seed plus a tag path, so streams never overlap by accident
//! and no state needs to be persisted for resumption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_MASK: u64 = 0x6d61_736b;
pub const TAG_NOISE: u64 = 0x6e6f_6973;
pub const TAG_BANK: u64 = 0x6261_6e6b;
pub const TAG_ENCODER: u64 = 0x656e_6364;
pub const TAG_SHUFFLE: u64 = 0x7368_7566;
pub const TAG_DROPOUT: u64 = 0x6472_6f70;
pub const TAG_VALIDATE: u64 = 0x7661_6c64;
pub const TAG_SPLIT: u64 = 0x7370_6c74;
pub const TAG_CORPUS: u64 = 0x636f_7270;
pub const TAG_KMEANS: u64 = 0x6b6d_6e73;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`; the result is a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
