//! Seeded random streams.
//!
//! Every stochastic operation draws from its own ChaCha stream, addressed by
//! `(seed, label)`. ChaCha is counter based, so streams are independent and a
//! run is reproducible regardless of the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over the label; stable across platforms and compiler versions.
fn label_id(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_id(label));
    rng
}

/// Derives a child seed, e.g. one per experiment repetition.
pub fn child_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut hash = label_id(label) ^ seed.rotate_left(17);
    hash ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    hash = hash.wrapping_mul(0x0100_0000_01b3);
    hash ^ (hash >> 29)
}
