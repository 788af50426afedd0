//! Deterministic RNG stream derivation.
//!
//! Every stochastic decision in the crate draws from a ChaCha stream derived
//! from a tuple of integers (global seed, sample id, epoch, ...), so runs are
//! reproducible and independent streams never alias.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a tuple of integers into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x5151_5347_u64; // arbitrary fixed tag
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Deterministic stream for the given derivation tuple.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        use rand::Rng;
        let mut a = stream(&[7, 0, 1]);
        let mut b = stream(&[7, 0, 1]);
        let mut c = stream(&[7, 0, 2]);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        let xc: u64 = c.random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}
