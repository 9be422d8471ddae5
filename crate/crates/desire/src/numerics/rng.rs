//! Deterministic random number generation.
//!
//! Every stochastic step in the crate (weight init, shuffling, subsampling,
//! Gaussian draws) pulls from a [`SeededRng`]. A stream is identified by a
//! 64-bit seed plus a list of purpose tags, so independent consumers never
//! share state: re-running any pipeline with the same seed reproduces every
//! draw bit-for-bit regardless of how unrelated code changes its own draws.
//!
//! The backing generator is ChaCha12, which has no platform-dependent state;
//! Gaussian samples use the ziggurat from `rand_distr`, which is likewise
//! exact integer/float arithmetic on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl SeededRng {
    /// Root stream for a bare seed.
    pub fn new(seed: u64) -> SeededRng {
        SeededRng { seed, inner: ChaCha12Rng::seed_from_u64(seed) }
    }

    /// Independent stream identified by `seed` and a path of purpose tags,
    /// e.g. `derive(7, &["lora-init", "task-3"])`.
    pub fn derive(seed: u64, tags: &[&str]) -> SeededRng {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        for tag in tags {
            hasher.update([0xff]); // unambiguous separator
            hasher.update(tag.as_bytes());
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        SeededRng { seed, inner: ChaCha12Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One draw from N(0, 1).
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for x in out.iter_mut() {
            *x = mean + std * self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize, mean: f64, std: f64) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v, mean, std);
        v
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        slice.shuffle(&mut self.inner);
    }

    /// `k` distinct indices drawn uniformly from `0..pool` (k <= pool),
    /// in random order.
    pub fn sample_without_replacement(&mut self, pool: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= pool);
        // Partial Fisher-Yates: only the first k slots are materialized.
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..pool);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// `k` indices drawn uniformly from `0..pool` with replacement.
    pub fn sample_with_replacement(&mut self, pool: usize, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.index(pool)).collect()
    }
}
