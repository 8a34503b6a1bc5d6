//! Deterministic random number generation.
//!
//! All randomness in this crate flows through one named generator with a
//! defined bit-stream: ChaCha8 (via `rand_chacha`, IETF variant, seeded
//! through `seed_from_u64`). Sub-streams for repetitions, tasks and trees
//! are derived with [`derive_seed`], a SplitMix64-based mixing chain, so
//! that any unit of work can be generated lazily or in parallel without
//! changing results.
//!
//! The uniform and normal transforms below are spelled out rather than
//! delegated to distribution crates so the exact draw sequence is part of
//! this crate's contract. Note that `ln`/`cos`/`sqrt` follow the platform
//! libm; the raw u64 stream itself is platform-independent.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Seed-domain tags keeping independent consumers on disjoint sub-streams.
pub mod domain {
    /// Fold permutations drawn by the resampling module.
    pub const FOLDS: u64 = 1;
    /// Per-task learner seeds derived by the tasking module.
    pub const TASK: u64 = 2;
    /// Synthetic data generation.
    pub const DGP: u64 = 3;
    /// Per-tree streams inside a random forest.
    pub const TREE: u64 = 4;
    /// Cold/warm assignment in the platform simulator.
    pub const SIM: u64 = 5;
}

/// SplitMix64 finalizer (Steele, Lea & Flood 2014). A bijective 64-bit
/// mixing function; the building block of all seed derivation here.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a base seed and a path of stream identifiers.
///
/// Defined as `fold(splitmix64(base), |h, p| splitmix64(h ^ splitmix64(p)))`.
/// Distinct paths yield independent streams; the same path always yields
/// the same seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Deterministic RNG wrapping the ChaCha8 stream with the crate's
/// documented scalar transforms.
pub struct DetRng {
    inner: ChaCha8Rng,
}

impl DetRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform f64 in [0, 1): the high 53 bits of one u64 draw.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by rejection sampling (unbiased).
    /// Consumes one u64 draw per loop iteration.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires bound > 0");
        // (2^64) mod bound: reject draws below this to remove modulo bias.
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Standard normal deviate via Box-Muller; consumes exactly two u64
    /// draws. u1 is mapped into (0, 1] so the logarithm is finite.
    pub fn next_standard_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, iterating from the last element down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
