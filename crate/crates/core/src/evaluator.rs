//! Evaluates expression trees over a dataset, producing one alpha value per
//! `(day, stock)` cell.
//!
//! Conventions:
//! * every window is trailing (days `d-w+1 ..= d`), never looking ahead;
//! * a window needs `w` valid points, otherwise the cell is NaN;
//! * any non-finite input or result yields NaN for that cell
//!   (division by zero, logarithm of a non-positive value, ...);
//! * ranks are average ranks for ties, scaled to `[0, 1]`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Zip};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Panel};
use crate::metrics::average_ranks;
use crate::program::{ExprTree, Operator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("feature `{0}` is not in the dataset")]
    MissingFeature(String),
    #[error("window operand of {op} must be a positive integer constant")]
    WindowNotInteger { op: Operator },
    #[error("operator {0} cannot be evaluated")]
    NotEvaluable(Operator),
}

/// Structural 64-bit hash; equal trees hash equally.
pub type Fingerprint = u64;

fn digest64(parts: &[&[u8]]) -> Fingerprint {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn fingerprint(tree: &ExprTree) -> Fingerprint {
    match tree {
        ExprTree::Scalar(s) => digest64(&[b"s", &s.value().to_bits().to_le_bytes()]),
        ExprTree::Feature(f) => digest64(&[b"f", f.name().as_bytes()]),
        ExprTree::Node { op, children } => {
            let kids: Vec<u8> = children.iter().flat_map(|c| fingerprint(c).to_le_bytes()).collect();
            digest64(&[b"n", &[op.id() as u8, children.len() as u8], &kids])
        }
    }
}

enum Value {
    Const(f64),
    Panel(Arc<Panel>),
}

fn clean(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NAN
    }
}

/// Evaluation context holding a subtree cache keyed by fingerprint.
/// Safe to share between threads.
pub struct EvalContext<'a> {
    dataset: &'a Dataset,
    cache: Mutex<HashMap<Fingerprint, (Arc<ExprTree>, Arc<Panel>)>>,
    capacity: usize,
}

impl<'a> EvalContext<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        EvalContext::with_capacity(dataset, 4096)
    }

    pub fn with_capacity(dataset: &'a Dataset, capacity: usize) -> Self {
        EvalContext { dataset, cache: Mutex::new(HashMap::new()), capacity }
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn evaluate(&self, tree: &Arc<ExprTree>) -> Result<Arc<Panel>, EvalError> {
        let (value, _) = self.eval_node(tree)?;
        Ok(match value {
            Value::Panel(p) => p,
            Value::Const(c) => Arc::new(Panel::from_elem(self.shape(), clean(c))),
        })
    }

    fn shape(&self) -> (usize, usize) {
        (self.dataset.days(), self.dataset.stocks())
    }

    fn eval_node(&self, tree: &Arc<ExprTree>) -> Result<(Value, Fingerprint), EvalError> {
        match tree.as_ref() {
            ExprTree::Scalar(s) => Ok((Value::Const(s.value()), 0)),
            ExprTree::Feature(f) => {
                let p = self
                    .dataset
                    .feature(f.name())
                    .ok_or_else(|| EvalError::MissingFeature(f.name().to_string()))?;
                // features are borrowed from the dataset; cache them too so the
                // clone happens once per context
                let fp = fingerprint(tree);
                if let Some(hit) = self.lookup(fp, tree) {
                    return Ok((Value::Panel(hit), fp));
                }
                let p = Arc::new(p.clone());
                self.store(fp, tree, &p);
                Ok((Value::Panel(p), fp))
            }
            ExprTree::Node { op, children } => {
                let fp = fingerprint(tree);
                if let Some(hit) = self.lookup(fp, tree) {
                    return Ok((Value::Panel(hit), fp));
                }
                let mut args = Vec::with_capacity(children.len());
                for c in children {
                    args.push(self.eval_node(c)?.0);
                }
                let out = apply(*op, &args, self.shape())?;
                if let Value::Panel(p) = &out {
                    self.store(fp, tree, p);
                }
                Ok((out, fp))
            }
        }
    }

    fn lookup(&self, fp: Fingerprint, tree: &Arc<ExprTree>) -> Option<Arc<Panel>> {
        let cache = self.cache.lock().expect("cache lock");
        cache.get(&fp).filter(|(t, _)| t == tree).map(|(_, p)| p.clone())
    }

    fn store(&self, fp: Fingerprint, tree: &Arc<ExprTree>, panel: &Arc<Panel>) {
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= self.capacity {
            cache.clear();
        }
        cache.entry(fp).or_insert_with(|| (tree.clone(), panel.clone()));
    }
}

/// Uncached evaluation.
pub fn evaluate(tree: &Arc<ExprTree>, dataset: &Dataset) -> Result<Panel, EvalError> {
    let ctx = EvalContext::with_capacity(dataset, 0);
    let out = ctx.evaluate(tree)?;
    Ok(Arc::try_unwrap(out).unwrap_or_else(|p| (*p).clone()))
}

fn window(op: Operator, v: &Value) -> Result<usize, EvalError> {
    match v {
        Value::Const(c) if *c >= 1.0 && c.fract() == 0.0 && *c < 1e6 => Ok(*c as usize),
        _ => Err(EvalError::WindowNotInteger { op }),
    }
}

fn panel<'v>(v: &'v Value, shape: (usize, usize), tmp: &'v mut Option<Panel>) -> &'v Panel {
    match v {
        Value::Panel(p) => p,
        Value::Const(c) => tmp.insert(Panel::from_elem(shape, *c)),
    }
}

fn apply(op: Operator, args: &[Value], shape: (usize, usize)) -> Result<Value, EvalError> {
    use Operator::*;
    let out = match op {
        Start | End => return Err(EvalError::NotEvaluable(op)),
        Add | Sub | Mul | Div => {
            let f: fn(f64, f64) -> f64 = match op {
                Add => |a, b| a + b,
                Sub => |a, b| a - b,
                Mul => |a, b| a * b,
                _ => |a, b| if b == 0.0 { f64::NAN } else { a / b },
            };
            match (&args[0], &args[1]) {
                (Value::Const(a), Value::Const(b)) => return Ok(Value::Const(f(*a, *b))),
                (Value::Panel(a), Value::Const(b)) => a.mapv(|x| clean(f(x, *b))),
                (Value::Const(a), Value::Panel(b)) => b.mapv(|y| clean(f(*a, y))),
                (Value::Panel(a), Value::Panel(b)) => {
                    Zip::from(a.as_ref()).and(b.as_ref()).map_collect(|&x, &y| clean(f(x, y)))
                }
            }
        }
        Abs | Ln | Sign => {
            let f: fn(f64) -> f64 = match op {
                Abs => f64::abs,
                Ln => |x| if x > 0.0 { x.ln() } else { f64::NAN },
                _ => |x| {
                    if x.is_nan() {
                        f64::NAN
                    } else if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
            };
            match &args[0] {
                Value::Const(c) => return Ok(Value::Const(f(*c))),
                Value::Panel(p) => p.mapv(|x| clean(f(x))),
            }
        }
        CsRank => {
            let mut tmp = None;
            cs_rank(panel(&args[0], shape, &mut tmp))
        }
        TsMean | TsStd | TsMax | TsMin | TsDelta | TsRank => {
            let w = window(op, &args[1])?;
            let mut tmp = None;
            let x = panel(&args[0], shape, &mut tmp);
            if op == TsDelta {
                ts_delta(x, w)
            } else {
                rolling(x, w, |win| match op {
                    TsMean => win.iter().sum::<f64>() / w as f64,
                    TsStd => sample_std(win),
                    TsMax => win.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    TsMin => win.iter().copied().fold(f64::INFINITY, f64::min),
                    _ => ts_rank(win),
                })
            }
        }
        TsCorr | TsCov => {
            let w = window(op, &args[2])?;
            let (mut ta, mut tb) = (None, None);
            let a = panel(&args[0], shape, &mut ta);
            let b = panel(&args[1], shape, &mut tb);
            rolling2(a, b, w, |x, y| if op == TsCorr { pearson(x, y) } else { sample_cov(x, y) })
        }
    };
    Ok(Value::Panel(Arc::new(out)))
}

fn cs_rank(x: &Panel) -> Panel {
    let mut out = Panel::from_elem(x.dim(), f64::NAN);
    for d in 0..x.nrows() {
        let row = x.row(d);
        let idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() == 1 {
            out[[d, idx[0]]] = 0.5;
            continue;
        }
        let vals: Vec<f64> = idx.iter().map(|&i| row[i]).collect();
        let ranks = average_ranks(&vals);
        let scale = (idx.len() - 1) as f64;
        for (k, &i) in idx.iter().enumerate() {
            out[[d, i]] = (ranks[k] - 1.0) / scale;
        }
    }
    out
}

fn ts_delta(x: &Panel, w: usize) -> Panel {
    let (days, stocks) = x.dim();
    let mut out = Panel::from_elem((days, stocks), f64::NAN);
    for d in w..days {
        for i in 0..stocks {
            out[[d, i]] = clean(x[[d, i]] - x[[d - w, i]]);
        }
    }
    out
}

/// Applies `f` to each full trailing window of `w` finite values.
fn rolling(x: &Panel, w: usize, f: impl Fn(&[f64]) -> f64) -> Panel {
    let (days, stocks) = x.dim();
    let mut out = Array2::from_elem((days, stocks), f64::NAN);
    let mut buf = Vec::with_capacity(w);
    for i in 0..stocks {
        for d in (w - 1)..days {
            buf.clear();
            buf.extend((d + 1 - w..=d).map(|t| x[[t, i]]));
            if buf.iter().all(|v| v.is_finite()) {
                out[[d, i]] = clean(f(&buf));
            }
        }
    }
    out
}

fn rolling2(a: &Panel, b: &Panel, w: usize, f: impl Fn(&[f64], &[f64]) -> f64) -> Panel {
    let (days, stocks) = a.dim();
    let mut out = Array2::from_elem((days, stocks), f64::NAN);
    let (mut xa, mut xb) = (Vec::with_capacity(w), Vec::with_capacity(w));
    for i in 0..stocks {
        for d in (w - 1)..days {
            xa.clear();
            xb.clear();
            xa.extend((d + 1 - w..=d).map(|t| a[[t, i]]));
            xb.extend((d + 1 - w..=d).map(|t| b[[t, i]]));
            if xa.iter().chain(&xb).all(|v| v.is_finite()) {
                out[[d, i]] = clean(f(&xa, &xb));
            }
        }
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Rank of the newest value within its window, scaled to `[0, 1]`.
fn ts_rank(win: &[f64]) -> f64 {
    let cur = win[win.len() - 1];
    let less = win.iter().filter(|&&v| v < cur).count() as f64;
    let equal = win.iter().filter(|&&v| v == cur).count() as f64;
    (less + 0.5 * (equal - 1.0)) / (win.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitSpec, Dataset};
    use chrono::NaiveDate;

    fn tiny() -> Dataset {
        let dates: Vec<NaiveDate> = crate::data::business_days(3);
        let symbols = vec!["A".to_string(), "B".to_string()];
        let p = |v: [f64; 6]| Panel::from_shape_vec((3, 2), v.to_vec()).unwrap();
        let features = vec![
            ("open".to_string(), p([10.0, 5.0, 11.0, 5.0, 12.0, 6.0])),
            ("high".to_string(), p([13.0, 6.0, 12.0, 6.0, 13.0, 7.0])),
            ("low".to_string(), p([9.0, 4.0, 10.0, 4.0, 11.0, 5.0])),
            ("close".to_string(), p([12.0, 5.0, 11.5, 5.5, 12.5, 6.5])),
            ("volume".to_string(), p([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            ("vwap".to_string(), p([11.0, 5.0, 11.0, 5.0, 12.0, 6.0])),
        ];
        Dataset::from_features(dates, symbols, features, 1, &SplitSpec::default()).unwrap()
    }

    fn fig1() -> Arc<ExprTree> {
        ExprTree::node(
            Operator::Div,
            vec![
                ExprTree::node(Operator::Sub, vec![ExprTree::feature("close"), ExprTree::feature("open")]),
                ExprTree::node(Operator::Sub, vec![ExprTree::feature("high"), ExprTree::feature("low")]),
            ],
        )
    }

    #[test]
    fn small_grid_cell() {
        let z = evaluate(&fig1(), &tiny()).unwrap();
        assert_eq!(z[[0, 0]], 0.5);
        // open == close, high != low
        assert_eq!(z[[1, 1]], 0.25);
    }

    #[test]
    fn division_by_zero_is_nan() {
        let t = ExprTree::node(Operator::Div, vec![ExprTree::feature("close"), ExprTree::scalar(0.0)]);
        assert!(evaluate(&t, &tiny()).unwrap().iter().all(|v| v.is_nan()));
        let t = ExprTree::node(
            Operator::Ln,
            vec![ExprTree::node(Operator::Sub, vec![ExprTree::feature("open"), ExprTree::feature("open")])],
        );
        assert!(evaluate(&t, &tiny()).unwrap().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn window_identities() {
        let ds = tiny();
        let close = ds.feature("close").unwrap().clone();
        for op in [Operator::TsMean, Operator::TsMax, Operator::TsMin] {
            let t = ExprTree::node(op, vec![ExprTree::feature("close"), ExprTree::scalar(1.0)]);
            assert_eq!(evaluate(&t, &ds).unwrap(), close);
        }
        let t = ExprTree::node(Operator::TsMean, vec![ExprTree::feature("close"), ExprTree::scalar(2.0)]);
        let z = evaluate(&t, &ds).unwrap();
        assert!(z[[0, 0]].is_nan());
        assert_eq!(z[[1, 0]], 11.75);
    }

    #[test]
    fn self_correlation_is_one() {
        let ds = tiny();
        let t = ExprTree::node(
            Operator::TsCorr,
            vec![ExprTree::feature("close"), ExprTree::feature("close"), ExprTree::scalar(3.0)],
        );
        let z = evaluate(&t, &ds).unwrap();
        assert!((z[[2, 0]] - 1.0).abs() < 1e-12);
        assert!((z[[2, 1]] - 1.0).abs() < 1e-12);
        assert!(z[[1, 0]].is_nan());
    }

    #[test]
    fn ranks_and_deltas() {
        let ds = tiny();
        let t = ExprTree::node(Operator::CsRank, vec![ExprTree::feature("close")]);
        let z = evaluate(&t, &ds).unwrap();
        assert_eq!((z[[0, 0]], z[[0, 1]]), (1.0, 0.0));
        let t = ExprTree::node(Operator::TsDelta, vec![ExprTree::feature("volume"), ExprTree::scalar(1.0)]);
        let z = evaluate(&t, &ds).unwrap();
        assert!(z[[0, 0]].is_nan());
        assert_eq!(z[[2, 1]], 2.0);
        let t = ExprTree::node(Operator::TsRank, vec![ExprTree::feature("volume"), ExprTree::scalar(3.0)]);
        assert_eq!(evaluate(&t, &ds).unwrap()[[2, 0]], 1.0);
    }

    #[test]
    fn errors() {
        let ds = tiny();
        let t = ExprTree::node(Operator::Abs, vec![ExprTree::feature("beta")]);
        assert_eq!(evaluate(&t, &ds), Err(EvalError::MissingFeature("beta".into())));
        let t = ExprTree::node(Operator::TsMean, vec![ExprTree::feature("close"), ExprTree::scalar(0.5)]);
        assert_eq!(evaluate(&t, &ds), Err(EvalError::WindowNotInteger { op: Operator::TsMean }));
    }

    #[test]
    fn fingerprints() {
        let a = fig1();
        let b = fig1();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        let s1 = ExprTree::node(Operator::Sub, vec![ExprTree::feature("close"), ExprTree::feature("open")]);
        let s2 = ExprTree::node(Operator::Sub, vec![ExprTree::feature("open"), ExprTree::feature("close")]);
        assert_ne!(fingerprint(&s1), fingerprint(&s2));
    }

    #[test]
    fn cache_is_exact() {
        let ds = tiny();
        let ctx = EvalContext::new(&ds);
        let first = ctx.evaluate(&fig1()).unwrap();
        assert!(ctx.cached() > 0);
        let again = ctx.evaluate(&fig1()).unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        assert_eq!(*first, evaluate(&fig1(), &ds).unwrap());
    }
}
