//! Seed derivation.
//!
//! Every random stream in the crate is keyed by a base seed plus a path of
//! integer tags (epoch, stratum, cluster, ...). Streams are derived by folding
//! the tags through the SplitMix64 finalizer, so adding a new consumer never
//! perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keeping independent consumers of one base seed apart.
pub mod domain {
    pub const KMEANS_INIT: u64 = 0x6b6d_6561_6e73;
    pub const STRATUM_SHUFFLE: u64 = 0x7374_7261_7475;
    pub const EPOCH_SHUFFLE: u64 = 0x6570_6f63_68;
    pub const STATS_SAMPLE: u64 = 0x7374_6174_73;
    pub const GUARANTEE_SAMPLE: u64 = 0x6775_6172;
    pub const SYNTHETIC: u64 = 0x7379_6e74;
    pub const ARM_STRATIFIED: u64 = 0x6172_6d31;
    pub const ARM_SHUFFLED: u64 = 0x6172_6d30;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &tag| splitmix64(acc ^ splitmix64(tag)))
}

/// A ChaCha8 stream for `(base, tags...)`.
pub fn stream(base: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
