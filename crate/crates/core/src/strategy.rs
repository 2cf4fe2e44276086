//! Alpha combination and a top-k/drop-n long-only backtest.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Panel, DATE_FORMAT};
use crate::metrics::{self, BacktestStats, MetricsError, MinedAlphaSet};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no rows without missing values to fit on")]
    NoValidRows,
    #[error("only {available} tradable stocks on the first day, need {needed}")]
    InsufficientStocks { needed: usize, available: usize },
    #[error("mined set is empty")]
    EmptySet,
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("backtest needs at least two days, got {0}")]
    TooFewDays(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub top_k: usize,
    pub drop_n: usize,
    /// Number of alphas, best train IC first, fed to the combiner.
    pub alphas_used: usize,
    pub ridge_lambda: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig { top_k: 50, drop_n: 5, alphas_used: 20, ridge_lambda: 1e-3 }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.top_k == 0 {
            return Err(StrategyError::InvalidConfig("top_k must be positive".into()));
        }
        if self.drop_n > self.top_k {
            return Err(StrategyError::InvalidConfig(format!(
                "drop_n ({}) exceeds top_k ({})",
                self.drop_n, self.top_k
            )));
        }
        if self.alphas_used == 0 {
            return Err(StrategyError::InvalidConfig("alphas_used must be positive".into()));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(StrategyError::InvalidConfig("ridge_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Maps alpha panels to a single signal panel of the same shape.
pub trait CombinerModel {
    fn predict(&self, alphas: &[&Panel]) -> Panel;
}

/// Ridge regression on standardized alpha values.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeCombiner {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeCombiner {
    /// Fits on cells in `rows` where every alpha and the target are finite.
    pub fn fit(
        alphas: &[&Panel],
        target: &Panel,
        rows: Range<usize>,
        lambda: f64,
    ) -> Result<Self, StrategyError> {
        let p = alphas.len();
        let stocks = target.ncols();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys = Vec::new();
        for d in rows {
            for s in 0..stocks {
                let y = target[[d, s]];
                let x: Vec<f64> = alphas.iter().map(|a| a[[d, s]]).collect();
                if y.is_finite() && x.iter().all(|v| v.is_finite()) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        if xs.is_empty() {
            return Err(StrategyError::NoValidRows);
        }
        let n = xs.len() as f64;
        let means: Vec<f64> = (0..p).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let stds: Vec<f64> = (0..p)
            .map(|j| {
                let var = xs.iter().map(|x| (x[j] - means[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let intercept = ys.iter().sum::<f64>() / n;
        let x = DMatrix::from_fn(xs.len(), p, |i, j| (xs[i][j] - means[j]) / stds[j]);
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| v - intercept));
        let mut gram = x.transpose() * &x;
        for j in 0..p {
            gram[(j, j)] += lambda;
        }
        let rhs = x.transpose() * y;
        let w = match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(p)),
        };
        Ok(RidgeCombiner { means, stds, weights: w.iter().copied().collect(), intercept })
    }
}

impl CombinerModel for RidgeCombiner {
    fn predict(&self, alphas: &[&Panel]) -> Panel {
        assert_eq!(alphas.len(), self.weights.len(), "alpha count matches the fitted model");
        let shape = alphas.first().map(|a| a.dim()).unwrap_or((0, 0));
        Panel::from_shape_fn(shape, |(d, s)| {
            let mut out = self.intercept;
            for (j, a) in alphas.iter().enumerate() {
                out += self.weights[j] * (a[[d, s]] - self.means[j]) / self.stds[j];
            }
            if out.is_finite() { out } else { f64::NAN }
        })
    }
}

/// Indices of the records fed to the combiner, highest train IC first.
pub fn select_alphas(set: &MinedAlphaSet, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    let ic = |i: usize| {
        let v = set.records()[i].ic;
        if v.is_finite() { v } else { f64::NEG_INFINITY }
    };
    idx.sort_by(|&a, &b| ic(b).total_cmp(&ic(a)).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Fits the ridge combiner on the selected alphas over `rows`.
pub fn combine_fit(
    set: &MinedAlphaSet,
    dataset: &Dataset,
    rows: Range<usize>,
    config: &StrategyConfig,
) -> Result<(RidgeCombiner, Vec<usize>), StrategyError> {
    if set.is_empty() {
        return Err(StrategyError::EmptySet);
    }
    let chosen = select_alphas(set, config.alphas_used);
    let panels: Vec<&Panel> = chosen.iter().map(|&i| set.records()[i].values.as_ref()).collect();
    let model = RidgeCombiner::fit(&panels, &dataset.target, rows, config.ridge_lambda)?;
    Ok((model, chosen))
}

/// Daily portfolio path; row `i` covers the move from day `i` to day `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BacktestResult {
    pub days: Vec<usize>,
    pub returns: Vec<f64>,
    pub turnover: Vec<f64>,
    /// Holdings (stock indices, sorted) after each rebalance.
    pub holdings: Vec<Vec<usize>>,
}

impl BacktestResult {
    pub fn stats(&self) -> Result<BacktestStats, StrategyError> {
        Ok(metrics::backtest_stats(&self.returns, &self.turnover)?)
    }

    pub fn write_csv<W: Write>(&self, dataset: &Dataset, mut w: W) -> Result<(), StrategyError> {
        writeln!(w, "date,portfolio_return,cumulative_return,turnover")?;
        let mut wealth = 1.0;
        for (i, &d) in self.days.iter().enumerate() {
            wealth *= 1.0 + self.returns[i];
            writeln!(
                w,
                "{},{},{},{}",
                dataset.dates[d].format(DATE_FORMAT),
                self.returns[i],
                wealth - 1.0,
                self.turnover[i]
            )?;
        }
        Ok(())
    }
}

fn ranked(signal: &Panel, day: usize) -> Vec<usize> {
    let row = signal.row(day);
    let mut idx: Vec<usize> = (0..row.len()).filter(|&s| row[s].is_finite()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Equal-weight top-k long portfolio with at most `drop_n` swaps per day.
/// The signal on day `d` trades into the close-to-close return from `d` to
/// `d + 1`; both days must lie in `rows`.
pub fn run_backtest(
    signal: &Panel,
    dataset: &Dataset,
    rows: Range<usize>,
    config: &StrategyConfig,
) -> Result<BacktestResult, StrategyError> {
    config.validate()?;
    if rows.len() < 2 {
        return Err(StrategyError::TooFewDays(rows.len()));
    }
    let close = dataset
        .feature("close")
        .ok_or_else(|| StrategyError::InvalidConfig("dataset has no close feature".into()))?;
    let k = config.top_k;
    let mut out = BacktestResult {
        days: Vec::new(),
        returns: Vec::new(),
        turnover: Vec::new(),
        holdings: Vec::new(),
    };
    let mut held: Vec<usize> = Vec::new();
    for d in rows.start..rows.end - 1 {
        let order = ranked(signal, d);
        let swaps = if d == rows.start {
            if order.len() < k {
                return Err(StrategyError::InsufficientStocks { needed: k, available: order.len() });
            }
            held = order[..k].to_vec();
            0
        } else {
            let mut rank = vec![usize::MAX; signal.ncols()];
            for (r, &s) in order.iter().enumerate() {
                rank[s] = r;
            }
            let target = &order[..k.min(order.len())];
            let mut leaving: Vec<usize> = held.iter().copied().filter(|s| rank[*s] >= k).collect();
            // worst ranked (or unranked) first
            leaving.sort_by(|a, b| rank[*b].cmp(&rank[*a]).then(a.cmp(b)));
            let entering: Vec<usize> = target.iter().copied().filter(|s| !held.contains(s)).collect();
            let swaps = config.drop_n.min(leaving.len()).min(entering.len());
            for i in 0..swaps {
                let pos = held.iter().position(|&s| s == leaving[i]).expect("held stock");
                held[pos] = entering[i];
            }
            swaps
        };
        let ret = held
            .iter()
            .map(|&s| {
                let r = close[[d + 1, s]] / close[[d, s]] - 1.0;
                if r.is_finite() { r } else { 0.0 }
            })
            .sum::<f64>()
            / held.len() as f64;
        let mut snapshot = held.clone();
        snapshot.sort_unstable();
        out.days.push(d);
        out.returns.push(ret);
        out.turnover.push(swaps as f64 / k as f64);
        out.holdings.push(snapshot);
    }
    Ok(out)
}
