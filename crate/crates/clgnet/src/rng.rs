//! Seed derivation and the crate-wide deterministic RNG.
//!
//! Every stochastic choice in the crate flows from explicit `u64` seeds
//! through [`mix`] into a counter-based ChaCha stream, so runs are
//! reproducible bit-for-bit across platforms and thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a base seed and a tag
/// (splitmix64 finalizer).
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mix_separates_tags() {
        assert_ne!(mix(0, 0), mix(0, 1));
        assert_ne!(mix(1, 0), mix(2, 0));
        assert_eq!(mix(7, 3), mix(7, 3));
    }

    #[test]
    fn rng_is_deterministic() {
        let a: Vec<f64> = (0..8).map(|_| rng_from(42).gen::<f64>()).collect();
        let mut r = rng_from(42);
        let first = r.gen::<f64>();
        assert_eq!(a[0], first);
    }
}
