//! Reductions used by every Monte Carlo estimator.
//!
//! All sums go through [`pairwise_sum`] over a vector collected in path
//! order, so an estimate depends only on the per-path values and never on
//! how the paths were scheduled.

use serde::{Deserialize, Serialize};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    /// Effective sample size used for `se`.
    pub ess: f64,
    pub n: usize,
}

/// Sample mean and standard error for independent draws.
pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    if n == 0 {
        return MeanSe {
            mean: f64::NAN,
            se: f64::NAN,
            ess: 0.0,
            n,
        };
    }
    let mean = pairwise_sum(values) / n as f64;
    let se = if n > 1 {
        let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        (pairwise_sum(&dev) / (n as f64 - 1.0) / n as f64).sqrt()
    } else {
        0.0
    };
    MeanSe {
        mean,
        se,
        ess: n as f64,
        n,
    }
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
///
/// Clamped below at 1, so the resulting standard error is never smaller than
/// the naive independent-draw one.
pub fn integrated_autocorr_time(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return 1.0;
    }
    let mean = pairwise_sum(values) / n as f64;
    let centred: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let autocov = |lag: usize| -> f64 {
        let prods: Vec<f64> = centred[..n - lag]
            .iter()
            .zip(&centred[lag..])
            .map(|(a, b)| a * b)
            .collect();
        pairwise_sum(&prods) / n as f64
    };
    let gamma0 = autocov(0);
    if gamma0 <= 0.0 {
        return 1.0;
    }
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n / 2 {
        let pair = (autocov(2 * m) + autocov(2 * m + 1)) / gamma0;
        if pair <= 0.0 {
            break;
        }
        // Initial monotone sequence: pairs must not increase.
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        m += 1;
    }
    tau.max(1.0)
}

/// Mean and standard error of a correlated sequence (ESS-adjusted).
pub fn mean_se_correlated(values: &[f64]) -> MeanSe {
    let base = mean_se(values);
    if values.len() < 4 {
        return base;
    }
    let tau = integrated_autocorr_time(values);
    MeanSe {
        se: base.se * tau.sqrt(),
        ess: values.len() as f64 / tau,
        ..base
    }
}

/// Weighted quantile with the lower-inverse convention.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = pairwise_sum(weights);
    let target = q * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= target {
            return values[i];
        }
    }
    idx.last().map(|&i| values[i]).unwrap_or(f64::NAN)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
