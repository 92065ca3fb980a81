//! Seed derivation and deterministic RNG construction.
//!
//! Every stochastic choice in the crate flows through a [`ChaCha12Rng`]
//! seeded from the experiment seed plus a salt path, so identical configs
//! reproduce bit-identical runs regardless of call order elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix a base seed with a salt path into a new 64-bit seed (splitmix64 steps).
pub fn derive_seed(base: u64, salt: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salt {
        state = state.wrapping_add(s).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Deterministic RNG for a given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Deterministic RNG for a seed plus salt path.
pub fn rng_for(base: u64, salt: &[u64]) -> ChaCha12Rng {
    rng_from_seed(derive_seed(base, salt))
}
