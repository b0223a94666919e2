//! Seeded, portable random streams.
//!
//! Uniform variates take the top 53 bits of a ChaCha8 word. Normal variates
//! use the Box–Muller transform on pairs of uniforms; the second variate of
//! each pair is cached and returned by the next call.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::Vector;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// An independent stream for `(seed, stream)`. Streams with different
    /// ids never overlap.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { inner, spare: None }
    }

    /// Derives a child stream from the next word of this one.
    pub fn fork(&mut self, stream: u64) -> SeededRng {
        let seed = self.inner.next_u64();
        SeededRng::with_stream(seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal variate (Box–Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vector {
        (0..n).map(|_| std * self.normal()).collect()
    }

    /// A uniformly distributed unit vector.
    pub fn unit_vector(&mut self, n: usize) -> Vector {
        loop {
            let v = self.normal_vec(n, 1.0);
            let norm = v.norm();
            if norm > 1e-12 {
                return v.scaled(1.0 / norm);
            }
        }
    }
}
