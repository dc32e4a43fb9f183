//! Seed fan-out.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded from one
//! master seed. Sub-seeds are derived by hashing a stream label with FNV-1a,
//! mixing it into the parent seed, and finalizing with SplitMix64. Streams
//! with different labels are statistically independent, and a stream's
//! output never depends on how many values another stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of a named child stream.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    mix64(parent ^ fnv1a(label).rotate_left(17))
}

/// Derive the seed of the `index`-th member of a family of streams.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    mix64(derive_seed(parent, label) ^ mix64(index))
}

pub fn stream(parent: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

pub fn indexed_stream(parent: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_indexed(parent, label, index))
}
