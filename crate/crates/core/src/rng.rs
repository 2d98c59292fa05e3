//! Seeded pseudo-random numbers with a fully specified derivation.
//!
//! Every random quantity in the crate comes from [`Rng`], so datasets,
//! partitions, and initializations reproduce across platforms and across
//! independent implementations:
//!
//! * the 256-bit state of xoshiro256** is filled from the 64-bit seed with
//!   SplitMix64 (`z += 0x9e3779b97f4a7c15; z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9;
//!   z = (z ^ (z >> 27)) * 0x94d049bb133111eb; z ^= z >> 31`), four outputs in order;
//! * a uniform double in `[0, 1)` is `(next_u64() >> 11) * 2^-53`;
//! * a bounded integer in `[0, n)` uses Lemire's multiply-shift with rejection;
//! * a standard normal uses Box-Muller on `u1 = 1 - uniform()`, `u2 = uniform()`,
//!   returning `sqrt(-2 ln u1) * cos(2 pi u2)` (the sine branch is discarded);
//! * shuffles are Fisher-Yates from the last index down.
//!
//! Independent streams for (seed, purpose, index) triples come from
//! [`derive_seed`], which applies the SplitMix64 finalizer to a mix of the
//! inputs.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

/// SplitMix64 output function (finalizer) applied to `z + golden`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent stream identified by `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(seed ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03));
    splitmix64(a ^ index.wrapping_mul(0xaef1_7502_108e_f2d9))
}

/// Stream tags used with [`derive_seed`].
pub mod stream {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    pub const SPLIT: u64 = 5;
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        // rand_xoshiro seeds xoshiro256** through SplitMix64, as documented above.
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

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

    pub fn normal(&mut self) -> f64 {
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

    /// `k` distinct values from `0..n`, in draw order (partial Fisher-Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "choose_distinct: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
