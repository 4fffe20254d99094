//! Deterministic seed derivation shared by every node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ArenaRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a, stable across platforms and compiler versions.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn rng(parts: &[u64]) -> ArenaRng {
    ArenaRng::seed_from_u64(mix(parts))
}

// Stream labels keep seeds for different purposes apart.
pub const STREAM_EPISODE: u64 = 1;
pub const STREAM_WORKER: u64 = 2;
pub const STREAM_POLICY_INIT: u64 = 3;

/// Seed for episode `episode` of environment node `env_id` in round `round`.
pub fn episode_seed(run_seed: u64, round: u64, env_id: usize, episode: u64) -> u64 {
    mix(&[run_seed, STREAM_EPISODE, round, env_id as u64, episode])
}
