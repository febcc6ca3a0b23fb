//! Seeded stream derivation for reproducible simulation.
//!
//! Every random decision in a run draws from a ChaCha8 stream derived from
//! the experiment seed plus a role path such as `(TRANSMIT, round, client,
//! layer)`. Streams are independent of evaluation order, so concurrent
//! clients produce the same bits as a sequential run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags that keep derived streams from colliding across subsystems.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const TRAIN: u64 = 0x03;
    pub const TRANSMIT: u64 = 0x04;
    pub const HESSIAN_BATCH: u64 = 0x05;
    pub const POWER_ITER: u64 = 0x06;
    pub const SYNTH_DATA: u64 = 0x07;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_path(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6A09_E667_F3BC_C908);
    for &part in path {
        state = splitmix64(state ^ splitmix64(part.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    state
}

/// Derive an independent scalar seed from the experiment seed and a role
/// path (for APIs that take a `u64` rather than a stream).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    splitmix64(mix_path(seed, path))
}

/// Derive an independent RNG from the experiment seed and a role path.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = mix_path(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
