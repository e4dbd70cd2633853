use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{Matrix, Real};

/// SplitMix64 stream with Box–Muller normals. The same seed gives the same
/// samples on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent child stream, keyed by `tag`.
    pub fn fork(seed: u64, tag: u64) -> Self {
        let mut mix = SplitMix64::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Self::new(mix.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One Box–Muller pair from two consecutive draws.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// A single normal; the second value of the pair is discarded.
    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }
}

/// `rows x cols` standard normals, filled pairwise in row-major order.
pub fn rng_normal<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<T> {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (a, b) = rng.normal_pair();
        data.push(T::lit(a));
        if data.len() < n {
            data.push(T::lit(b));
        }
    }
    Matrix::new(rows, cols, data).expect("length matches by construction")
}
