//! Forecast error metrics, directional accuracy and non-parametric model
//! comparison.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("evaluation span is empty")]
    Empty,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("need at least {needed} paired samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("all paired differences are zero")]
    AllDifferencesZero,
    #[error("no critical value for k={k} models at alpha={alpha}")]
    OutOfTable { k: usize, alpha: f64 },
    #[error("need at least 2 models and 2 datasets, got {models}x{datasets}")]
    TooSmallTable { models: usize, datasets: usize },
}

/// Actuals `x_j`, forecasts, the actual preceding each `x_j`, and the
/// in-sample series used to scale MASE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSeries {
    pub actuals: Vec<f64>,
    pub forecasts: Vec<f64>,
    /// `x_{j-1}` for every evaluated `j`, used by Dstat.
    pub previous: Vec<f64>,
    pub training: Vec<f64>,
}

impl EvalSeries {
    fn check(&self) -> Result<(), MetricsError> {
        if self.actuals.len() != self.forecasts.len() {
            return Err(MetricsError::LengthMismatch(format!(
                "{} actuals vs {} forecasts",
                self.actuals.len(),
                self.forecasts.len()
            )));
        }
        if self.actuals.is_empty() {
            return Err(MetricsError::Empty);
        }
        for (name, v) in [
            ("actuals", &self.actuals),
            ("forecasts", &self.forecasts),
            ("previous", &self.previous),
            ("training", &self.training),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// All error statistics for one model on one span. `mape`, `mase` and
/// `dstat` are `None` when their inputs make them undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Fraction, not percent.
    pub mape: Option<f64>,
    pub mase: Option<f64>,
    /// Percent in `[0, 100]`.
    pub dstat: Option<f64>,
}

pub fn mae(actuals: &[f64], forecasts: &[f64]) -> f64 {
    actuals.iter().zip(forecasts).map(|(x, f)| (f - x).abs()).sum::<f64>() / actuals.len() as f64
}

pub fn mse(actuals: &[f64], forecasts: &[f64]) -> f64 {
    actuals.iter().zip(forecasts).map(|(x, f)| (f - x).powi(2)).sum::<f64>() / actuals.len() as f64
}

pub fn rmse(actuals: &[f64], forecasts: &[f64]) -> f64 {
    mse(actuals, forecasts).sqrt()
}

/// `None` if any actual is zero.
pub fn mape(actuals: &[f64], forecasts: &[f64]) -> Option<f64> {
    if actuals.contains(&0.0) {
        return None;
    }
    let s: f64 = actuals.iter().zip(forecasts).map(|(x, f)| ((f - x) / x).abs()).sum();
    Some(s / actuals.len() as f64)
}

/// MAE scaled by the mean absolute one-step change of `training`.
/// `None` for training series shorter than 2 or constant.
pub fn mase(actuals: &[f64], forecasts: &[f64], training: &[f64]) -> Option<f64> {
    if training.len() < 2 {
        return None;
    }
    let scale = training.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (training.len() - 1) as f64;
    if scale == 0.0 {
        return None;
    }
    Some(mae(actuals, forecasts) / scale)
}

pub fn compute_metrics(ev: &EvalSeries) -> Result<MetricSet, MetricsError> {
    ev.check()?;
    let (a, f) = (&ev.actuals, &ev.forecasts);
    let mse = mse(a, f);
    let dstat = if ev.previous.len() == a.len() {
        Some(dstat(ev)?)
    } else {
        None
    };
    Ok(MetricSet {
        mae: mae(a, f),
        mse,
        rmse: mse.sqrt(),
        mape: mape(a, f),
        mase: mase(a, f, &ev.training),
        dstat,
    })
}

/// Percentage of steps where `(forecast - prev) * (actual - prev) > 0`.
pub fn dstat(ev: &EvalSeries) -> Result<f64, MetricsError> {
    ev.check()?;
    if ev.previous.len() != ev.actuals.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} previous actuals for {} steps",
            ev.previous.len(),
            ev.actuals.len()
        )));
    }
    let hits = ev
        .actuals
        .iter()
        .zip(&ev.forecasts)
        .zip(&ev.previous)
        .filter(|((x, f), p)| (*f - *p) * (*x - *p) > 0.0)
        .count();
    Ok(100.0 * hits as f64 / ev.actuals.len() as f64)
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Above this many non-zero differences the normal approximation is used.
pub const WILCOXON_EXACT_MAX: usize = 25;
pub const WILCOXON_MIN_SAMPLES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.len() < WILCOXON_MIN_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            needed: WILCOXON_MIN_SAMPLES,
            got: a.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("samples"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(MetricsError::AllDifferencesZero);
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        // ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=max_sum).rev() {
                counts[s] += counts[s - r];
            }
        }
        let limit = (statistic * 2.0).round() as usize;
        let tail: u64 = counts[..=limit].iter().sum();
        let p = 2.0 * tail as f64 / 2f64.powi(n as i32);
        return Ok(WilcoxonResult {
            statistic,
            p_value: p.min(1.0),
            n_effective: n,
            exact: true,
        });
    }

    let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (statistic - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        statistic,
        p_value: (2.0 * normal.cdf(-z.abs())).min(1.0),
        n_effective: n,
        exact: false,
    })
}

/// Critical values `q_alpha` for the Nemenyi test, `k = 2..=10` models.
const NEMENYI_Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const NEMENYI_Q_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64, MetricsError> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &NEMENYI_Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &NEMENYI_Q_10
    } else {
        return Err(MetricsError::OutOfTable { k, alpha });
    };
    if !(2..=10).contains(&k) {
        return Err(MetricsError::OutOfTable { k, alpha });
    }
    Ok(table[k - 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemenyiResult {
    /// Mean rank per model; rank 1 is the lowest error.
    pub average_ranks: Vec<f64>,
    pub critical_difference: f64,
    pub q_alpha: f64,
    /// Friedman chi-square statistic over the same ranks.
    pub friedman_chi2: f64,
}

/// Rank models on every dataset and compute the Nemenyi critical difference.
/// `errors[m][d]` is the error of model `m` on dataset `d`.
pub fn friedman_nemenyi(errors: &[Vec<f64>], alpha: f64) -> Result<NemenyiResult, MetricsError> {
    let k = errors.len();
    let n = errors.first().map_or(0, Vec::len);
    if k < 2 || n < 2 {
        return Err(MetricsError::TooSmallTable { models: k, datasets: n });
    }
    if errors.iter().any(|row| row.len() != n) {
        return Err(MetricsError::LengthMismatch("ragged error table".into()));
    }
    if errors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("error table"));
    }
    let q_alpha = nemenyi_q(k, alpha)?;
    let mut sums = vec![0.0; k];
    for d in 0..n {
        let column: Vec<f64> = errors.iter().map(|row| row[d]).collect();
        for (s, r) in sums.iter_mut().zip(average_ranks(&column)) {
            *s += r;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let average_ranks: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let sq: f64 = average_ranks.iter().map(|r| r * r).sum();
    let friedman_chi2 = 12.0 * nf / (kf * (kf + 1.0)) * (sq - kf * (kf + 1.0).powi(2) / 4.0);
    Ok(NemenyiResult {
        average_ranks,
        critical_difference: q_alpha * (kf * (kf + 1.0) / (6.0 * nf)).sqrt(),
        q_alpha,
        friedman_chi2,
    })
}
