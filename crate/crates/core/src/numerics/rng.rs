use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Zipf};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::Matrix;

/// Seeded xoshiro256++ generator (state expanded from the seed with splitmix64).
///
/// Single-owner: clone it to fork a stream, or use [`Rng::derive`] for
/// independent per-worker streams.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        // golden-ratio increment keeps neighbouring stream ids far apart
        Self::new(seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Index in `[0, n)` with `P(i) ∝ (i + 1)^(-s)`; `s = 0` is uniform.
    pub fn zipf_index(&mut self, n: usize, s: f64) -> usize {
        if s == 0.0 {
            return self.below(n);
        }
        let d = Zipf::new(n as f64, s).expect("valid Zipf parameters");
        (d.sample(&mut self.inner) as usize - 1).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)` in random order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("finite normals")
    }

    /// Xavier/Glorot uniform init for a `fan_out × fan_in` weight.
    pub fn xavier_uniform(&mut self, fan_out: usize, fan_in: usize) -> Matrix {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_out * fan_in).map(|_| self.uniform_range(-limit, limit)).collect();
        Matrix::from_vec(fan_out, fan_in, data).expect("finite uniforms")
    }
}
