//! Seeding helpers.
//!
//! All stochastic behavior in the crate flows from explicit u64 seeds
//! through ChaCha8 streams, so the same seed always replays the same
//! artifacts. Per-sample seeds are split off a root seed with a SplitMix64
//! mix so samples can be generated independently and in any order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; good avalanche, stable forever.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a root seed and a lane index.
pub fn split_seed(root: u64, lane: u64) -> u64 {
    splitmix64(root ^ splitmix64(lane.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Derive a per-(epoch, sample) seed.
pub fn sample_seed(root: u64, epoch: u64, index: u64) -> u64 {
    split_seed(split_seed(root, epoch.wrapping_add(1)), index)
}
