//! Deterministic seed derivation.
//!
//! Experiments hold one master seed; every stochastic stage (scene
//! generation, annotation sampling, weight init, epoch shuffling) derives its
//! own child seed so stages stay independent and replayable.

/// splitmix64 finalizer; good avalanche, cheap, stable.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for stream `stream`, element `index`, under `master`.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(stream)) ^ index)
}

/// Stream tags used across the library and CLI.
pub mod stream {
    pub const SCENE_TRAIN: u64 = 1;
    pub const SCENE_TEST: u64 = 2;
    pub const ANNOTATION: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DISTURB: u64 = 6;
    pub const RUN: u64 = 7;
}
