//! Seeded random number generation.
//!
//! All randomness in the crate flows through [`Rng`], a thin wrapper around
//! the ChaCha8 stream cipher. The generator is fully specified by its 64-bit
//! seed, so every run is reproducible bit-for-bit across machines. Derived
//! generators for parallel work (per-sample seeds) use `seed ^ index` so
//! samples are independent of scheduling order.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for the `index`-th parallel unit of work.
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(self.seed ^ index)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, buf: &mut [f32]) {
        for v in buf.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Bernoulli draw with probability `p` of `true`.
    pub fn chance(&mut self, p: f32) -> bool {
        self.inner.gen::<f32>() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}
