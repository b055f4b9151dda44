//! Deterministic random source shared by every generator in the crate.
//!
//! The stream is xoshiro256** seeded through SplitMix64 (the reference
//! seeding procedure for the xoshiro family). Derived variates are defined
//! exactly so that another implementation can reproduce a dataset bit for bit:
//!
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, a double in `[0, 1)`.
//! * `below(n)`: `(next_u64() as u128 * n) >> 64`.
//! * `normal()`: Box-Muller cosine branch on two fresh uniforms,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine branch is discarded.
//!
//! Sub-streams are obtained with [`DetRng::derive`], which folds a list of
//! stream labels into the seed with the SplitMix64 finalizer.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function applied to `z + GOLDEN_GAMMA`.
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-stream `labels` of `seed`: `s = seed; s = mix64(s ^ mix64(label))` per label.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(seed, |s, &label| mix64(s ^ mix64(label)))
}

#[derive(Debug, Clone)]
pub struct DetRng(Xoshiro256StarStar);

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        Self::new(derive_seed(seed, labels))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` draws of `mean + std * normal()` rounded to f32.
    pub fn normal_vec(&mut self, n: usize, mean: f32, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| (mean as f64 + std as f64 * self.normal()) as f32)
            .collect()
    }

    /// Fisher-Yates sample of `k` distinct values from `0..n`, returned sorted.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<u32> {
        assert!(k <= n);
        let mut pool: Vec<u32> = (0..n as u32).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }
}
