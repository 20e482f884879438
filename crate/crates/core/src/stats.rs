//! Streaming mean/variance accumulators (Welford), used by the sampling
//! oracles and the Monte Carlo reductions so large draw counts run in fixed
//! memory.

use crate::scalar::Scalar;

/// Welford accumulator for a scalar statistic.
#[derive(Clone, Copy, Debug)]
pub struct Welford<T> {
    count: u64,
    mean: T,
    m2: T,
}

impl<T: Scalar> Default for Welford<T> {
    fn default() -> Self {
        Welford {
            count: 0,
            mean: T::zero(),
            m2: T::zero(),
        }
    }
}

impl<T: Scalar> Welford<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: T) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / T::from_count(self.count as usize);
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance; `None` below two samples.
    pub fn variance(&self) -> Option<T> {
        if self.count < 2 {
            return None;
        }
        Some(self.m2 / T::from_count(self.count as usize - 1))
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> Option<T> {
        self.variance()
            .map(|v| (v / T::from_count(self.count as usize)).sqrt())
    }
}

/// Mean and standard error of a slice in one pass.
pub fn mean_stderr<T: Scalar>(xs: &[T]) -> (T, Option<T>) {
    let mut w = Welford::new();
    for &x in xs {
        w.push(x);
    }
    (w.mean(), w.stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_two_pass() {
        let xs = [1.0f64, 2.0, 4.0, 8.0, 16.0];
        let mut w = Welford::new();
        for &x in &xs {
            w.push(x);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((w.mean() - mean).abs() < 1e-12);
        assert!((w.variance().unwrap() - var).abs() < 1e-12);
        assert!((w.stderr().unwrap() - (var / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_no_variance() {
        let mut w = Welford::<f64>::new();
        w.push(3.0);
        assert_eq!(w.mean(), 3.0);
        assert!(w.variance().is_none());
        assert!(w.stderr().is_none());
    }
}
