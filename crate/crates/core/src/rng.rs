//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator as implemented by `rand_chacha` 0.3,
//! keyed with `ChaCha8Rng::seed_from_u64(seed)` (which expands the 64-bit
//! seed into the 256-bit key with the PCG32 routine of `rand_core` 0.6).
//! All derived quantities are computed here from `next_u64` alone so the
//! streams do not depend on any distribution code in other crates:
//!
//! * `uniform()` is `(next_u64() >> 11) * 2^-53`, a value in `[0, 1)`.
//! * `below(n)` is Lemire's widening multiply with rejection, unbiased.
//! * `standard_normal()` is Box–Muller on two uniforms, `u1` mapped to
//!   `(0, 1]` via `1 - uniform()`, returning only the cosine branch.
//! * `shuffle` is Fisher–Yates from the last index down.
//!
//! Seeds for independent pipeline stages are derived with [`derive_seed`],
//! which is SplitMix64 applied to `master ^ splitmix64(tag)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One SplitMix64 step (Steele, Lea & Flood), used as a 64-bit mixer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of a sub-stream from a master seed and a stage tag.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// A deterministic random stream. Identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// A fresh stream keyed by `derive_seed(self.seed(), tag)`. Does not
    /// advance `self`.
    pub fn fork(&self, tag: u64) -> RngState {
        RngState::new(derive_seed(self.seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..len` without replacement, returned in
    /// ascending order. `count` is clamped to `len`.
    pub fn sample_indices(&mut self, len: usize, count: usize) -> Vec<usize> {
        let count = count.min(len);
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..count {
            let j = i + self.below(len - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool.sort_unstable();
        pool
    }
}
