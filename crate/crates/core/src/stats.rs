//! Moment estimators, least squares and bootstrap helpers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise summation, which keeps rounding growth logarithmic.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&dev) / (n - 1) as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let se = if n > 1 { (variance(values) / n as f64).sqrt() } else { 0.0 };
        Self {
            mean: mean(values),
            se,
            n,
        }
    }

    /// `|mean - target| <= k se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// `E^{1/p} |X|^p` with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub p: f64,
    pub estimate: f64,
    pub se: f64,
    pub n: usize,
}

pub fn abs_moment_root(values: &[f64], p: f64) -> MomentEstimate {
    let powers: Vec<f64> = values.iter().map(|v| v.abs().powf(p)).collect();
    let m = MeanEstimate::of(&powers);
    let estimate = m.mean.max(0.0).powf(1.0 / p);
    let se = if m.mean > 0.0 {
        m.se * m.mean.powf(1.0 / p - 1.0) / p
    } else {
        0.0
    };
    MomentEstimate {
        p,
        estimate,
        se,
        n: values.len(),
    }
}

/// Ordinary least squares `y = intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            got: x.len(),
        });
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientPoints { needed: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(LinearFit { slope, intercept, r2 })
}

/// Empirical quantile by linear interpolation of the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices of one bootstrap resample of size `n`.
pub fn resample<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ols_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 - 2.0 * v).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-14 && (f.intercept - 0.5).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(ols(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn moment_root_of_constant() {
        let m = abs_moment_root(&[-2.0, 2.0, 2.0], 2.0);
        assert!((m.estimate - 2.0).abs() < 1e-15);
        assert_eq!(m.se, 0.0);
        let e = MeanEstimate::of(&[1.0, 2.0, 3.0]);
        assert!((e.mean - 2.0).abs() < 1e-15 && (e.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
    }

    proptest! {
        #[test]
        fn pairwise_sum_matches_naive(v in proptest::collection::vec(-1e3f64..1e3, 0..300)) {
            let naive: f64 = v.iter().sum();
            let scale: f64 = v.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
            prop_assert!((pairwise_sum(&v) - naive).abs() <= 1e-12 * scale);
        }

        #[test]
        fn quantiles_are_monotone(mut v in proptest::collection::vec(-10.0f64..10.0, 1..100), p in 0.0f64..1.0, q in 0.0f64..1.0) {
            v.sort_by(f64::total_cmp);
            let (lo, hi) = (p.min(q), p.max(q));
            prop_assert!(quantile(&v, lo) <= quantile(&v, hi));
        }
    }
}
