//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use alphaprog::data::{business_days, Dataset, Panel, SplitSpec};
use alphaprog::program::{ExprTree, Operator};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_panel(rng: &mut ChaCha8Rng, days: usize, stocks: usize) -> Panel {
    Array2::from_shape_fn((days, stocks), |_| rng.random_range(-1.0..1.0))
}

/// Random OHLCV bars with a few exact ties and a few missing cells.
pub fn random_dataset(seed: u64, days: usize, stocks: usize) -> Dataset {
    let mut r = rng(seed);
    let mut open = Array2::zeros((days, stocks));
    let mut close = Array2::zeros((days, stocks));
    let mut high = Array2::zeros((days, stocks));
    let mut low = Array2::zeros((days, stocks));
    let mut volume = Array2::zeros((days, stocks));
    let mut vwap = Array2::zeros((days, stocks));
    for s in 0..stocks {
        let mut p: f64 = r.random_range(5.0..50.0);
        for d in 0..days {
            let o = p * (1.0 + r.random_range(-0.02..0.02));
            let c = if r.random_bool(0.05) { o } else { o * (1.0 + r.random_range(-0.03..0.03)) };
            let h = o.max(c) * (1.0 + r.random_range(0.0..0.02));
            let l = o.min(c) * (1.0 - r.random_range(0.0..0.02));
            open[[d, s]] = o;
            close[[d, s]] = c;
            high[[d, s]] = h;
            low[[d, s]] = l;
            volume[[d, s]] = r.random_range(1e5f64..1e6).round();
            vwap[[d, s]] = r.random_range(l..=h);
            p = c;
        }
    }
    for _ in 0..(days * stocks / 50) {
        let (d, s) = (r.random_range(0..days), r.random_range(0..stocks));
        volume[[d, s]] = f64::NAN;
    }
    let features = vec![
        ("open".to_string(), open),
        ("close".to_string(), close),
        ("high".to_string(), high),
        ("low".to_string(), low),
        ("volume".to_string(), volume),
        ("vwap".to_string(), vwap),
    ];
    let symbols = (0..stocks).map(|i| format!("T{i:03}")).collect();
    Dataset::from_features(business_days(days), symbols, features, 5, &SplitSpec::default()).unwrap()
}

fn finite_or_nan(v: f64) -> f64 {
    if v.is_finite() { v } else { f64::NAN }
}

/// Evaluates an expression tree one cell at a time, straight from the
/// operator definitions.
pub struct CellEvaluator<'a> {
    ds: &'a Dataset,
    memo: HashMap<(usize, usize, usize), f64>,
}

impl<'a> CellEvaluator<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        CellEvaluator { ds, memo: HashMap::new() }
    }

    pub fn panel(&mut self, tree: &Arc<ExprTree>) -> Panel {
        let (days, stocks) = (self.ds.days(), self.ds.stocks());
        Array2::from_shape_fn((days, stocks), |(d, s)| self.cell(tree, d, s))
    }

    fn window(t: &ExprTree) -> usize {
        match t {
            ExprTree::Scalar(s) => s.value() as usize,
            _ => panic!("window must be a constant"),
        }
    }

    pub fn cell(&mut self, tree: &Arc<ExprTree>, d: usize, s: usize) -> f64 {
        let key = (Arc::as_ptr(tree) as usize, d, s);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let v = self.compute(tree, d, s);
        self.memo.insert(key, v);
        v
    }

    fn history(&mut self, t: &Arc<ExprTree>, d: usize, s: usize, w: usize) -> Option<Vec<f64>> {
        if d + 1 < w {
            return None;
        }
        let xs: Vec<f64> = (d + 1 - w..=d).map(|k| self.cell(t, k, s)).collect();
        xs.iter().all(|v| v.is_finite()).then_some(xs)
    }

    fn compute(&mut self, tree: &Arc<ExprTree>, d: usize, s: usize) -> f64 {
        let (op, ch) = match tree.as_ref() {
            ExprTree::Scalar(c) => return c.value(),
            ExprTree::Feature(f) => return self.ds.feature(f.name()).unwrap()[[d, s]],
            ExprTree::Node { op, children } => (*op, children),
        };
        use Operator::*;
        let v = match op {
            Add => self.cell(&ch[0], d, s) + self.cell(&ch[1], d, s),
            Sub => self.cell(&ch[0], d, s) - self.cell(&ch[1], d, s),
            Mul => self.cell(&ch[0], d, s) * self.cell(&ch[1], d, s),
            Div => {
                let b = self.cell(&ch[1], d, s);
                if b == 0.0 { f64::NAN } else { self.cell(&ch[0], d, s) / b }
            }
            Abs => self.cell(&ch[0], d, s).abs(),
            Ln => {
                let x = self.cell(&ch[0], d, s);
                if x > 0.0 { x.ln() } else { f64::NAN }
            }
            Sign => {
                let x = self.cell(&ch[0], d, s);
                if x.is_nan() { f64::NAN } else if x == 0.0 { 0.0 } else { x.signum() }
            }
            CsRank => {
                let x = self.cell(&ch[0], d, s);
                if !x.is_finite() {
                    f64::NAN
                } else {
                    let row: Vec<f64> = (0..self.ds.stocks())
                        .map(|k| self.cell(&ch[0], d, k))
                        .filter(|v| v.is_finite())
                        .collect();
                    if row.len() == 1 {
                        0.5
                    } else {
                        let less = row.iter().filter(|&&v| v < x).count() as f64;
                        let equal = row.iter().filter(|&&v| v == x).count() as f64;
                        (less + (equal - 1.0) / 2.0) / (row.len() - 1) as f64
                    }
                }
            }
            TsDelta => {
                let w = Self::window(&ch[1]);
                if d < w { f64::NAN } else { self.cell(&ch[0], d, s) - self.cell(&ch[0], d - w, s) }
            }
            TsMean | TsStd | TsMax | TsMin | TsRank => {
                let w = Self::window(&ch[1]);
                match self.history(&ch[0], d, s, w) {
                    None => f64::NAN,
                    Some(xs) => {
                        let n = xs.len() as f64;
                        let mean = xs.iter().sum::<f64>() / n;
                        match op {
                            TsMean => mean,
                            TsStd => (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt(),
                            TsMax => xs.iter().cloned().fold(f64::MIN, f64::max),
                            TsMin => xs.iter().cloned().fold(f64::MAX, f64::min),
                            _ => {
                                let cur = xs[xs.len() - 1];
                                let less = xs.iter().filter(|&&v| v < cur).count() as f64;
                                let equal = xs.iter().filter(|&&v| v == cur).count() as f64;
                                (less + (equal - 1.0) / 2.0) / (n - 1.0)
                            }
                        }
                    }
                }
            }
            TsCorr | TsCov => {
                let w = Self::window(&ch[2]);
                match (self.history(&ch[0], d, s, w), self.history(&ch[1], d, s, w)) {
                    (Some(a), Some(b)) => {
                        let n = a.len() as f64;
                        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
                        if op == TsCov {
                            cov / (n - 1.0)
                        } else {
                            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
                            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
                            if va <= 0.0 || vb <= 0.0 { f64::NAN } else { (cov / (va * vb).sqrt()).clamp(-1.0, 1.0) }
                        }
                    }
                    _ => f64::NAN,
                }
            }
            Start | End => unreachable!(),
        };
        finite_or_nan(v)
    }
}

/// True when both are NaN or they agree within `tol` (relative for large
/// magnitudes).
pub fn close_enough(a: f64, b: f64, tol: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Per-day Pearson over cells where both values are finite, averaged over
/// days with at least three pairs and nonzero variance on both sides.
pub fn naive_ic(z: ArrayView2<f64>, mu: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    let mut days = 0;
    for d in 0..z.nrows() {
        let pairs: Vec<(f64, f64)> = (0..z.ncols())
            .map(|s| (z[[d, s]], mu[[d, s]]))
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .collect();
        if pairs.len() < 3 {
            continue;
        }
        let n = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
        let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
        let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            continue;
        }
        total += cov / (va.sqrt() * vb.sqrt());
        days += 1;
    }
    if days == 0 { f64::NAN } else { total / days as f64 }
}

/// Average ranks (1-based) computed by counting, not sorting.
pub fn count_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&v| v < x).count() as f64;
            let equal = xs.iter().filter(|&&v| v == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Rank-transform each day's jointly finite cells, then `naive_ic`.
pub fn naive_rank_ic(z: ArrayView2<f64>, mu: ArrayView2<f64>) -> f64 {
    let mut rz = Array2::from_elem(z.dim(), f64::NAN);
    let mut rm = Array2::from_elem(z.dim(), f64::NAN);
    for d in 0..z.nrows() {
        let idx: Vec<usize> =
            (0..z.ncols()).filter(|&s| z[[d, s]].is_finite() && mu[[d, s]].is_finite()).collect();
        let a = count_ranks(&idx.iter().map(|&s| z[[d, s]]).collect::<Vec<_>>());
        let b = count_ranks(&idx.iter().map(|&s| mu[[d, s]]).collect::<Vec<_>>());
        for (k, &s) in idx.iter().enumerate() {
            rz[[d, s]] = a[k];
            rm[[d, s]] = b[k];
        }
    }
    naive_ic(rz.view(), rm.view())
}

/// Largest peak-to-trough fall of the wealth curve by checking every pair.
pub fn mdd_quadratic(returns: &[f64]) -> f64 {
    let mut wealth = vec![1.0];
    for r in returns {
        let last = *wealth.last().unwrap();
        wealth.push(last * (1.0 + r));
    }
    let mut worst: f64 = 0.0;
    for i in 0..wealth.len() {
        for j in i..wealth.len() {
            worst = worst.max((wealth[i] - wealth[j]) / wealth[i]);
        }
    }
    worst
}

/// Dataset whose prices never move.
pub fn constant_dataset(days: usize, stocks: usize) -> Dataset {
    let price = Array2::from_shape_fn((days, stocks), |(_, s)| 10.0 + s as f64);
    let features = vec![
        ("open".to_string(), price.clone()),
        ("close".to_string(), price.clone()),
        ("high".to_string(), price.clone() * 1.01),
        ("low".to_string(), price.clone() * 0.99),
        ("volume".to_string(), Array2::from_elem((days, stocks), 1000.0)),
        ("vwap".to_string(), price),
    ];
    let symbols = (0..stocks).map(|i| format!("C{i:02}")).collect();
    Dataset::from_features(business_days(days), symbols, features, 5, &SplitSpec::default()).unwrap()
}
