//! Stable per-trial seed derivation for reproducible parallel Monte Carlo.
//!
//! Every experiment trial gets its own generator seeded by mixing
//! `(master seed, scope label, trial index)` through splitmix64 steps. The
//! mixer is written out here rather than taken from `std`'s hashers because
//! results must be bit-stable across platforms and toolchain versions:
//! reports are compared across runs with different worker counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 step: advances the state by the golden-ratio increment and
/// returns the finalized output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable, collision-tolerant (the result is
/// mixed further, labels only need to separate experiment scopes).
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Absorbs each word with one splitmix64 step, feeding the output forward.
pub fn mix(parts: &[u64]) -> u64 {
    let mut state: u64 = 0;
    let mut out: u64 = 0;
    for &p in parts {
        state ^= p;
        out = splitmix64(&mut state);
        state = out;
    }
    out
}

/// Seed for one trial of one named experiment scope.
pub fn trial_seed(master_seed: u64, scope: &str, trial: u64) -> u64 {
    mix(&[master_seed, label_hash(scope), trial])
}

/// Fresh generator for one trial, independent of scheduling order.
pub fn trial_rng(master_seed: u64, scope: &str, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(master_seed, scope, trial))
}
