//! Deterministic random stream derivation.
//!
//! Every stochastic draw in the crate comes from a ChaCha8 stream derived
//! from a list of u64 labels (root seed, purpose tag, step index, ...), so
//! any sub-computation can be replayed in isolation: the trainer derives one
//! stream per step, evaluation derives streams disjoint from training, and
//! resuming from a checkpoint reproduces the uninterrupted run bitwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping unrelated streams disjoint.
pub mod stream {
    pub const WORLD_BASIS: u64 = 0x01;
    pub const WORLD_MAP_TEXT: u64 = 0x02;
    pub const WORLD_MAP_VISION: u64 = 0x03;
    pub const SAMPLE_TEXT: u64 = 0x04;
    pub const SAMPLE_VISION: u64 = 0x05;
    pub const DATASET: u64 = 0x06;
    pub const INIT: u64 = 0x07;
    pub const TRAIN_STEP: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
    pub const SAMPLER: u64 = 0x0a;
    pub const DIVERSITY: u64 = 0x0b;
    pub const WORLD_MAP_BASE: u64 = 0x0c;
}

/// Derive a ChaCha8 stream from a list of labels via a splitmix64 chain.
pub fn derive(labels: &[u64]) -> ChaCha8Rng {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &l in labels {
        state = splitmix64(state ^ l.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
