//! Deterministic seed derivation.
//!
//! Every stochastic routine in this crate takes an explicit seed and forks
//! per-trial generators through [`mix_seed`], so sweeps are reproducible and
//! safe to parallelize: no generator is ever shared across trials.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates sequential trial indices.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream of indices.
pub fn mix_seed(base: u64, indices: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x243f_6a88_85a3_08d3);
    for &ix in indices {
        s = splitmix64(s ^ splitmix64(ix));
    }
    s
}

/// Seeded generator used everywhere randomness is needed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_is_deterministic_and_index_sensitive() {
        assert_eq!(mix_seed(7, &[1, 2]), mix_seed(7, &[1, 2]));
        assert_ne!(mix_seed(7, &[1, 2]), mix_seed(7, &[2, 1]));
        assert_ne!(mix_seed(7, &[0]), mix_seed(8, &[0]));
    }
}
