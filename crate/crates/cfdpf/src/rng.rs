//! Deterministic random stream derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from the
//! scenario's master seed plus a tag path, e.g. `(master, LOCAL_STEP, run,
//! node, k)`. Two runs with the same configuration therefore replay
//! bit-identically, and independent streams (per run, per node, per step) can
//! be consumed concurrently without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags. Values are part of the reproducibility contract: changing
/// them changes every seeded result.
pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const TRUTH: u64 = 2;
    pub const MEASUREMENT: u64 = 3;
    pub const INIT_CENTRAL: u64 = 4;
    pub const INIT_LOCAL: u64 = 5;
    pub const INIT_FUSION: u64 = 6;
    pub const INIT_STANDALONE: u64 = 7;
    pub const CENTRAL_STEP: u64 = 8;
    pub const LOCAL_STEP: u64 = 9;
    pub const FUSION_STEP: u64 = 10;
    pub const STANDALONE_STEP: u64 = 11;
    pub const PCRLB_TRAJECTORY: u64 = 12;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream from the master seed and a tag path.
pub fn derive(master: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut acc = splitmix64(master);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    ChaCha12Rng::seed_from_u64(acc)
}
