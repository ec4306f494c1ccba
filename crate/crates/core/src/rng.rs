//! Seed derivation. Every random stream is keyed by a base seed plus a
//! purpose tag and indices, so any epoch or clip can be replayed without
//! running what came before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag.as_bytes())) ^ index)
}

pub fn seeded(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// Stream for one clip within one epoch.
pub fn clip_rng(seed: u64, tag: &str, epoch: u64, clip_id: &str) -> ChaCha8Rng {
    let clip = fnv1a(clip_id.as_bytes());
    ChaCha8Rng::seed_from_u64(splitmix64(derive_seed(seed, tag, epoch) ^ clip))
}
