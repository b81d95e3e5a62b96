//! Seeded random streams.
//!
//! All randomness in the crate comes from ChaCha20 (`rand_chacha`), keyed by
//! `ChaCha20Rng::seed_from_u64(seed)` with a purpose-specific stream id.
//! Draws are defined on raw 64-bit outputs so they do not depend on
//! sampling algorithms inside `rand`:
//!
//! * uniform: `((x >> 11) + 0.5) * 2^-53`, strictly inside (0, 1)
//! * normal: inverse standard-normal CDF of a uniform
//! * sign: top bit of `x`
//! * index below `n`: high 64 bits of `x * n`
//!
//! Changing any of these rules changes every seeded artifact, so they are
//! versioned together with the adapter file format.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Stream ids, one per independent use of a seed.
pub mod stream {
    pub const PERMUTATION: u64 = 1;
    pub const GAUSS: u64 = 2;
    pub const RIGHT_DIAG: u64 = 3;
    pub const FACTORS: u64 = 4;
    pub const MODEL: u64 = 5;
    pub const TASK: u64 = 6;
    pub const BATCH: u64 = 7;
}

pub struct SeededStream {
    rng: ChaCha20Rng,
    normal: Normal,
}

impl SeededStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            rng,
            normal: Normal::standard(),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform random permutation of `0..n` (Fisher-Yates, descending).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Derives an independent seed for a sub-component (group, split, ...).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        ^ salt
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut s = SeededStream::new(7, stream::GAUSS);
                move |_| s.next_u64()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut s = SeededStream::new(7, stream::GAUSS);
                move |_| s.next_u64()
            })
            .collect();
        let c: Vec<u64> = (0..4)
            .map({
                let mut s = SeededStream::new(7, stream::PERMUTATION);
                move |_| s.next_u64()
            })
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut s = SeededStream::new(1, stream::GAUSS);
        let xs: Vec<f64> = (0..20_000).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        assert!(xs.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn permutation_is_bijection() {
        let mut s = SeededStream::new(3, stream::PERMUTATION);
        let mut p = s.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
