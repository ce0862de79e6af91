//! Deterministic random-stream derivation.
//!
//! Every stochastic component in the crate (weight init, shuffling, dropout
//! masks, gradient noise) draws from its own ChaCha stream derived from the
//! run seed plus a list of integer tags naming the purpose. Streams derived
//! from distinct tag lists are independent for all practical purposes, and
//! adding a consumer never perturbs the draws seen by existing ones. That
//! independence is what makes "identical runs are bitwise identical" hold
//! even as optional features (dropout, companions) toggle on and off.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; a bijective mix with full avalanche.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream from a base seed and purpose tags.
///
/// Tags fold into the state sequentially, so both the values and their order
/// matter: `&[1, 2]` and `&[2, 1]` name different streams.
pub fn derive_stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = derive_seed(seed, tags);
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s.wrapping_add(GOLDEN));
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Same derivation as [`derive_stream`] but collapsed to a single seed
/// value, for components that key their own streams later (dropout layers).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed ^ GOLDEN);
    for &tag in tags {
        state = mix(state.wrapping_add(GOLDEN).wrapping_add(tag));
    }
    state
}
