//! Seed derivation. Every stochastic stage derives its own stream from
//! (base seed, stream id) so stages can be reordered or skipped without
//! perturbing each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 step; good avalanche, cheap, stable across platforms.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for (seed, stream). Streams with distinct ids are
/// decorrelated even for adjacent seeds.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let a = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    let b = splitmix64(a ^ stream);
    let c = splitmix64(b);
    let d = splitmix64(c);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Stream id for the i'th item of a stage (per image, per batch). Base
/// stream ids stay below 256, so shifted indices cannot collide with them
/// or with each other across stages.
pub fn indexed_stream(stream: u64, index: u64) -> u64 {
    stream + (index << 8)
}

/// Named streams so call sites cannot collide by accident.
pub mod streams {
    pub const DATA_GEN: u64 = 1;
    pub const TEACHER_INIT: u64 = 2;
    pub const TEACHER_TRAIN: u64 = 3;
    pub const SYNTH_LATENT: u64 = 4;
    pub const SYNTH_LABELS: u64 = 5;
    pub const SYNTH_CUTOUT: u64 = 6;
    pub const QAT_TRAIN: u64 = 7;
    pub const BASELINE_LABELS: u64 = 8;
}
