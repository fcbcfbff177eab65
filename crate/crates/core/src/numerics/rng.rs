//! Deterministic random number generation.
//!
//! Every stochastic component of the engine draws from a [`Rng`] seeded by a
//! 64-bit integer, so identical seeds reproduce identical streams across runs
//! and platforms. Independent lanes (data sampling, dropout, init, ...) use
//! ChaCha's stream counter instead of re-deriving seeds.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// Counter-based deterministic RNG. Single-owner: pass `&mut Rng` down the
/// call chain rather than sharing.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent lane under the same seed. Streams with distinct ids never
    /// overlap, which keeps e.g. per-iteration batch sampling reproducible
    /// after a resume.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        self.inner.gen_range(0..bound)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn normal_f64(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.inner)
    }
}

/// Draw `n` samples from N(mean, std^2) as a 1-D tensor.
/// Deterministic given the rng state; `std == 0` yields a constant tensor.
pub fn sample_normal(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Tensor {
    assert!(std >= 0.0, "std must be non-negative");
    let data = (0..n).map(|_| rng.normal_f64(mean, std)).collect();
    Tensor::from_vec(&[n], data).expect("length matches by construction")
}
