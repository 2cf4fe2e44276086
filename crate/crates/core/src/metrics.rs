//! Alpha metrics: IC, Rank IC, MaxCorr against a mined set, the
//! diversity-discounted Perf objective, and backtest statistics.

use std::ops::Range;
use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Panel;
use crate::evaluator::Fingerprint;
use crate::program::{AlphaProgram, ExprTree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty return series")]
    EmptySeries,
}

/// Minimum number of paired observations for a day to count.
pub const MIN_PAIRS: usize = 3;

/// Average ranks (1-based) with ties sharing the mean rank.
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
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation over pairs where both sides are finite. `None` when
/// fewer than [`MIN_PAIRS`] pairs remain or either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(a, b)| (*a, *b)).collect();
    pearson_pairs(&pairs)
}

fn pearson_pairs(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < MIN_PAIRS {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(a, b) in pairs {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn check_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

fn daily_mean(
    z: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    ranked: bool,
) -> Result<f64, MetricsError> {
    check_shape(&z, &mu)?;
    let (mut sum, mut days) = (0.0, 0usize);
    for (zr, mr) in z.rows().into_iter().zip(mu.rows()) {
        let mut pairs: Vec<(f64, f64)> = zr
            .iter()
            .zip(mr.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| (*a, *b))
            .collect();
        if ranked && pairs.len() >= MIN_PAIRS {
            let ra = average_ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let rb = average_ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            pairs = ra.into_iter().zip(rb).collect();
        }
        if let Some(c) = pearson_pairs(&pairs) {
            sum += c;
            days += 1;
        }
    }
    Ok(if days == 0 { f64::NAN } else { sum / days as f64 })
}

/// Mean over days of the cross-sectional Pearson correlation between alpha
/// values and returns. Days with fewer than three valid pairs or zero
/// variance are skipped; NaN if no day qualifies.
pub fn ic(z: ArrayView2<f64>, mu: ArrayView2<f64>) -> Result<f64, MetricsError> {
    daily_mean(z, mu, false)
}

/// IC computed on per-day average ranks (Spearman).
pub fn rank_ic(z: ArrayView2<f64>, mu: ArrayView2<f64>) -> Result<f64, MetricsError> {
    daily_mean(z, mu, true)
}

/// A discovered alpha together with its values over the full day axis.
#[derive(Clone, Debug)]
pub struct AlphaRecord {
    pub program: AlphaProgram,
    pub tree: Arc<ExprTree>,
    pub fingerprint: Fingerprint,
    pub values: Arc<Panel>,
    /// IC on the training split.
    pub ic: f64,
    /// Perf against the mined set at the time the alpha was added.
    pub perf: f64,
}

/// Ordered mined alphas with unique fingerprints.
#[derive(Clone, Debug, Default)]
pub struct MinedAlphaSet {
    records: Vec<AlphaRecord>,
}

impl MinedAlphaSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[AlphaRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, fp: Fingerprint) -> bool {
        self.records.iter().any(|r| r.fingerprint == fp)
    }

    /// Adds a record unless its fingerprint is already present.
    pub fn add(&mut self, record: AlphaRecord) -> bool {
        if self.contains(record.fingerprint) {
            return false;
        }
        self.records.push(record);
        true
    }
}

/// Options for the Perf objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfOptions {
    /// Discount IC by correlation with the mined set.
    pub diversity: bool,
    /// Use |IC| between alphas instead of the signed value.
    pub abs_corr: bool,
}

impl Default for PerfOptions {
    fn default() -> Self {
        PerfOptions { diversity: true, abs_corr: false }
    }
}

/// Largest IC between `z` and any mined alpha over `rows`; 0 for an empty set.
/// NaN correlations are ignored.
pub fn max_corr(z: ArrayView2<f64>, set: &MinedAlphaSet, rows: Range<usize>, abs_corr: bool) -> f64 {
    let z = z.slice(ndarray::s![rows.clone(), ..]);
    set.records
        .iter()
        .filter_map(|r| {
            let other = r.values.slice(ndarray::s![rows.clone(), ..]);
            let c = ic(z, other).ok()?;
            c.is_finite().then_some(if abs_corr { c.abs() } else { c })
        })
        .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))))
        .unwrap_or(0.0)
}

/// `(1 - MaxCorr(z, G)) * IC(z, mu)` over `rows`. A NaN IC maps to 0.
pub fn perf(
    z: ArrayView2<f64>,
    mu: ArrayView2<f64>,
    set: &MinedAlphaSet,
    rows: Range<usize>,
    opts: PerfOptions,
) -> Result<f64, MetricsError> {
    check_shape(&z, &mu)?;
    let r = ic(z.slice(ndarray::s![rows.clone(), ..]), mu.slice(ndarray::s![rows.clone(), ..]))?;
    if !r.is_finite() {
        return Ok(0.0);
    }
    let mc = if opts.diversity { max_corr(z, set, rows, opts.abs_corr) } else { 0.0 };
    Ok((1.0 - mc) * r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestStats {
    pub cumulative: f64,
    pub sharpe: f64,
    pub mdd: f64,
    pub tvr_mean: f64,
}

pub const TRADING_DAYS: f64 = 252.0;

/// Largest peak-to-trough loss of the compounded wealth curve starting at 1.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let (mut wealth, mut peak, mut mdd) = (1.0f64, 1.0f64, 0.0f64);
    for r in returns {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        mdd = mdd.max((peak - wealth) / peak);
    }
    mdd
}

pub fn backtest_stats(returns: &[f64], turnover: &[f64]) -> Result<BacktestStats, MetricsError> {
    if returns.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let n = returns.len() as f64;
    let cumulative = returns.iter().fold(1.0, |w, r| w * (1.0 + r)) - 1.0;
    let mean = returns.iter().sum::<f64>() / n;
    let sd = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let sharpe = if sd > 0.0 { mean / sd * TRADING_DAYS.sqrt() } else { 0.0 };
    let tvr_mean =
        if turnover.is_empty() { 0.0 } else { turnover.iter().sum::<f64>() / turnover.len() as f64 };
    Ok(BacktestStats { cumulative, sharpe, mdd: max_drawdown(returns), tvr_mean })
}
