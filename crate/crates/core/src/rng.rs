//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) keyed by
//! the run seed, with a distinct ChaCha stream id per consumer. ChaCha8 is a
//! counter-based generator with a fixed, platform-independent output, so a
//! `(seed, stream)` pair always yields the same sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream id used for arrival generation.
pub const ARRIVAL_STREAM: u64 = 0;
/// Stream id handed to scheduling policies.
pub const POLICY_STREAM: u64 = 1;

/// Inversion is done in chunks of at most this mean so `exp(-mean)` never
/// underflows.
const POISSON_CHUNK: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        self.uniform() < p
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.gen_range(0..n)
    }

    /// Poisson draw by sequential-search inversion. Means above 30 are split
    /// into a sum of independent chunks, which is again Poisson.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let mut left = mean;
        let mut total = 0;
        while left > 0.0 {
            let chunk = left.min(POISSON_CHUNK);
            total += self.poisson_inversion(chunk);
            left -= chunk;
        }
        total
    }

    fn poisson_inversion(&mut self, mean: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        // The cap only matters if rounding leaves the cdf short of u near 1.
        let cap = (10.0 * mean) as u64 + 100;
        while u >= cdf && k < cap {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..8).map({
            let mut r = SimRng::new(7, 0);
            move |_| r.uniform()
        }).collect();
        let b: Vec<f64> = (0..8).map({
            let mut r = SimRng::new(7, 0);
            move |_| r.uniform()
        }).collect();
        let c: Vec<f64> = (0..8).map({
            let mut r = SimRng::new(7, 1);
            move |_| r.uniform()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_mean_and_variance() {
        for &mean in &[0.5, 2.0, 5.0 / 3.0, 45.0] {
            let mut rng = SimRng::new(11, 0);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| rng.poisson(mean) as f64).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 3.0 * se, "mean {m} vs {mean}");
            assert!((var / mean - 1.0).abs() < 0.05, "variance {var} vs {mean}");
        }
    }

    #[test]
    fn poisson_zero_mean() {
        let mut rng = SimRng::new(1, 0);
        assert_eq!(rng.poisson(0.0), 0);
    }
}
