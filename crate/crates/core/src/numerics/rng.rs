//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by a 64-bit seed. Normal draws use
//! the ziggurat sampler from `rand_distr`. Both are fixed algorithms, so the
//! stream for a seed is stable across platforms and runs.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from this generator's seed.
    ///
    /// Does not advance `self`; the same `stream` always yields the same child.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Exponential draw with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        let e: f64 = Exp1.sample(&mut self.inner);
        mean * e
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        self.inner.random_range(0..n)
    }
}

/// `n` i.i.d. draws from `N(mean, std^2 I)`.
pub fn gaussian_sample(rng: &mut Rng, n: usize, mean: &[f64], std: f64) -> Result<Vec<Vec<f64>>> {
    if !(std >= 0.0) {
        return Err(Error::invalid("std", format!("must be >= 0, got {std}")));
    }
    Ok((0..n)
        .map(|_| mean.iter().map(|&m| m + std * rng.normal()).collect())
        .collect())
}
