//! Panel data: `(days x stocks)` matrices, CSV ingestion and emission,
//! forward-return targets and a synthetic market generator.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{evaluate, EvalError};
use crate::metrics;
use crate::program::{ExprTree, DEFAULT_FEATURES};

/// `(day, stock)` matrix; NaN marks missing cells.
pub type Panel = Array2<f64>;

pub const DEFAULT_HORIZON: usize = 20;
pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: missing column `{0}`")]
    Schema(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("no data rows")]
    Empty,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("planted alpha: {0}")]
    Eval(#[from] EvalError),
}

/// How trading days are divided into train / valid / test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// Leading fractions of the day axis; test takes the remainder.
    Fractions { train: f64, valid: f64 },
    /// First day of the validation and test periods.
    Dates { valid_start: String, test_start: String },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.6, valid: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, valid or test)")),
        }
    }
}

impl Splits {
    pub fn resolve(spec: &SplitSpec, dates: &[NaiveDate]) -> Result<Splits, DataError> {
        let n = dates.len();
        let (a, b) = match spec {
            SplitSpec::Fractions { train, valid } => {
                if !(*train > 0.0 && *valid >= 0.0 && train + valid <= 1.0) {
                    return Err(DataError::InvalidParams(format!(
                        "split fractions train={train} valid={valid}"
                    )));
                }
                let a = ((n as f64) * train).floor() as usize;
                let b = ((n as f64) * (train + valid)).floor() as usize;
                (a, b.max(a))
            }
            SplitSpec::Dates { valid_start, test_start } => {
                let parse = |s: &str| {
                    NaiveDate::parse_from_str(s, DATE_FORMAT)
                        .map_err(|e| DataError::InvalidParams(format!("split date `{s}`: {e}")))
                };
                let (v, t) = (parse(valid_start)?, parse(test_start)?);
                if v > t {
                    return Err(DataError::InvalidParams("valid_start after test_start".into()));
                }
                (dates.partition_point(|d| *d < v), dates.partition_point(|d| *d < t))
            }
        };
        Ok(Splits { train: 0..a, valid: a..b, test: b..n })
    }

    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Features and forward-return target over a shared day/stock index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dates: Vec<NaiveDate>,
    pub symbols: Vec<String>,
    pub features: Vec<(String, Panel)>,
    pub target: Panel,
    pub horizon: usize,
    pub splits: Splits,
}

impl Dataset {
    /// Builds a dataset, deriving the target from `close`.
    pub fn from_features(
        dates: Vec<NaiveDate>,
        symbols: Vec<String>,
        features: Vec<(String, Panel)>,
        horizon: usize,
        split: &SplitSpec,
    ) -> Result<Dataset, DataError> {
        if dates.is_empty() || symbols.is_empty() {
            return Err(DataError::Empty);
        }
        if horizon == 0 {
            return Err(DataError::InvalidParams("horizon must be >= 1".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidParams("day labels must be strictly increasing".into()));
        }
        let shape = (dates.len(), symbols.len());
        if let Some((name, _)) = features.iter().find(|(_, p)| p.dim() != shape) {
            return Err(DataError::InvalidParams(format!("feature `{name}` has the wrong shape")));
        }
        let close = features
            .iter()
            .find(|(n, _)| n == "close")
            .map(|(_, p)| p)
            .ok_or_else(|| DataError::Schema("close".into()))?;
        let target = forward_return(close, horizon);
        let splits = Splits::resolve(split, &dates)?;
        Ok(Dataset { dates, symbols, features, target, horizon, splits })
    }

    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn stocks(&self) -> usize {
        self.symbols.len()
    }

    pub fn feature(&self, name: &str) -> Option<&Panel> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn rows(&self, split: Split) -> Range<usize> {
        self.splits.get(split)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string(), "symbol".to_string()];
        header.extend(self.feature_names());
        w.write_record(&header)?;
        for (d, date) in self.dates.iter().enumerate() {
            let day = date.format(DATE_FORMAT).to_string();
            for (i, sym) in self.symbols.iter().enumerate() {
                let cells: Vec<f64> = self.features.iter().map(|(_, p)| p[[d, i]]).collect();
                if cells.iter().all(|v| v.is_nan()) {
                    continue;
                }
                let mut rec = vec![day.clone(), sym.clone()];
                rec.extend(cells.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(File::create(path)?)
    }
}

/// `close[d+h] / close[d] - 1`, NaN where either end is missing or out of range.
pub fn forward_return(close: &Panel, horizon: usize) -> Panel {
    let (days, stocks) = close.dim();
    let mut out = Panel::from_elem((days, stocks), f64::NAN);
    for d in 0..days.saturating_sub(horizon) {
        for i in 0..stocks {
            let (a, b) = (close[[d, i]], close[[d + horizon, i]]);
            let r = b / a - 1.0;
            if r.is_finite() {
                out[[d, i]] = r;
            }
        }
    }
    out
}

pub fn load_csv(
    path: &Path,
    features: &[String],
    horizon: usize,
    split: &SplitSpec,
) -> Result<Dataset, DataError> {
    read_csv(File::open(path)?, features, horizon, split)
}

/// Pivots long-format rows `date,symbol,<features...>` into panels.
pub fn read_csv<R: Read>(
    reader: R,
    features: &[String],
    horizon: usize,
    split: &SplitSpec,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(name.to_string()))
    };
    let date_col = col("date")?;
    let sym_col = col("symbol")?;
    let feat_cols = features.iter().map(|f| col(f)).collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<(NaiveDate, String, Vec<f64>)> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        // header is line 1
        let row = idx + 2;
        let rec = rec.map_err(|e| DataError::Parse { row, message: e.to_string() })?;
        let field = |c: usize| {
            rec.get(c).ok_or_else(|| DataError::Parse { row, message: format!("missing field {c}") })
        };
        let date = NaiveDate::parse_from_str(field(date_col)?, DATE_FORMAT)
            .map_err(|e| DataError::Parse { row, message: format!("bad date: {e}") })?;
        let symbol = field(sym_col)?.to_string();
        if symbol.is_empty() {
            return Err(DataError::Parse { row, message: "empty symbol".into() });
        }
        let mut values = Vec::with_capacity(feat_cols.len());
        for &c in &feat_cols {
            let raw = field(c)?;
            let v = if raw.is_empty() {
                f64::NAN
            } else {
                raw.parse::<f64>()
                    .map_err(|_| DataError::Parse { row, message: format!("bad number `{raw}`") })?
            };
            values.push(v);
        }
        rows.push((date, symbol, values));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let dates: Vec<NaiveDate> = rows.iter().map(|r| r.0).collect::<BTreeSet<_>>().into_iter().collect();
    let symbols: Vec<String> =
        rows.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let day_ix: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let sym_ix: HashMap<&str, usize> = symbols.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let shape = (dates.len(), symbols.len());
    let mut panels: Vec<Panel> = features.iter().map(|_| Panel::from_elem(shape, f64::NAN)).collect();
    let mut seen = vec![false; shape.0 * shape.1];
    for (n, (date, symbol, values)) in rows.iter().enumerate() {
        let (d, i) = (day_ix[date], sym_ix[symbol.as_str()]);
        if std::mem::replace(&mut seen[d * shape.1 + i], true) {
            return Err(DataError::Parse { row: n + 2, message: format!("duplicate row {date} {symbol}") });
        }
        for (p, v) in panels.iter_mut().zip(values) {
            p[[d, i]] = *v;
        }
    }
    let features = features.iter().cloned().zip(panels).collect();
    Dataset::from_features(dates, symbols, features, horizon, split)
}

/// Parameters of the synthetic market.
#[derive(Clone, Debug)]
pub struct SynthParams {
    pub seed: u64,
    pub days: usize,
    pub stocks: usize,
    pub planted: Option<Arc<ExprTree>>,
    /// Target IC of the planted alpha against the forward return.
    pub strength: f64,
    pub horizon: usize,
    pub split: SplitSpec,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 1,
            days: 250,
            stocks: 50,
            planted: None,
            strength: 0.0,
            horizon: DEFAULT_HORIZON,
            split: SplitSpec::default(),
        }
    }
}

/// Business days starting 2020-01-02.
pub fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2020, 1, 2).expect("valid date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

struct Bars {
    open: Panel,
    high: Panel,
    low: Panel,
    close: Panel,
    volume: Panel,
    vwap: Panel,
}

impl Bars {
    fn generate(rng: &mut ChaCha8Rng, days: usize, stocks: usize) -> Bars {
        let shape = (days, stocks);
        let mut bars = Bars {
            open: Panel::zeros(shape),
            high: Panel::zeros(shape),
            low: Panel::zeros(shape),
            close: Panel::zeros(shape),
            volume: Panel::zeros(shape),
            vwap: Panel::zeros(shape),
        };
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let params: Vec<(f64, f64, f64)> = (0..stocks)
            .map(|_| {
                let u: [f64; 3] = [normal(), normal(), normal()];
                let sigma = 0.02 * (0.35 * u[0]).exp();
                let price = (3.0 + 0.8 * u[1]).exp();
                let vol = (13.0 + u[2]).exp();
                (sigma, price, vol)
            })
            .collect();
        let mut prev: Vec<f64> = params.iter().map(|p| p.1).collect();
        for d in 0..days {
            for (i, &(sigma, _, vol)) in params.iter().enumerate() {
                let o = prev[i] * (0.3 * sigma * normal()).exp();
                let c = o * (sigma * normal()).exp();
                let h = o.max(c) * (0.5 * sigma * normal().abs()).exp();
                let l = o.min(c) * (-0.5 * sigma * normal().abs()).exp();
                let typical = 0.25 * (o + h + l + c);
                let u = 0.5 + 0.2 * normal().clamp(-2.5, 2.5);
                let vwap = (0.5 * typical + 0.5 * (l + u * (h - l))).clamp(l, h);
                bars.open[[d, i]] = o;
                bars.close[[d, i]] = c;
                bars.high[[d, i]] = h;
                bars.low[[d, i]] = l;
                bars.vwap[[d, i]] = vwap;
                bars.volume[[d, i]] = vol * (0.5 * normal()).exp();
                prev[i] = c;
            }
        }
        bars
    }

    /// Scales every price of day `t` by `scale[t, i]`.
    fn rescaled(&self, scale: &Panel) -> Vec<(String, Panel)> {
        let s = |p: &Panel| p * scale;
        vec![
            ("open".into(), s(&self.open)),
            ("close".into(), s(&self.close)),
            ("high".into(), s(&self.high)),
            ("low".into(), s(&self.low)),
            ("volume".into(), self.volume.clone()),
            ("vwap".into(), s(&self.vwap)),
        ]
    }
}

/// Per-day z-scores over finite cells; non-finite cells become 0.
fn standardize_rows(z: &Panel) -> Panel {
    let mut out = Panel::zeros(z.dim());
    for (row, mut dst) in z.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let vals: Vec<f64> = row.iter().copied().filter(|v| v.is_finite()).collect();
        if vals.len() < 2 {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        if var <= 0.0 {
            continue;
        }
        let sd = var.sqrt();
        for (o, v) in dst.iter_mut().zip(row) {
            if v.is_finite() {
                *o = (v - mean) / sd;
            }
        }
    }
    out
}

/// Geometric random-walk market. With a planted alpha, each day's signal
/// shifts that stock's price level `horizon` days later, so the forward
/// return correlates with the signal. The shift size is calibrated by
/// bisection until the IC of the planted alpha equals `strength`.
pub fn synth_market(params: &SynthParams) -> Result<Dataset, DataError> {
    let SynthParams { seed, days, stocks, strength, horizon, .. } = *params;
    if days < 40 || stocks < 10 {
        return Err(DataError::InvalidParams(format!(
            "need days >= 40 and stocks >= 10, got {days} x {stocks}"
        )));
    }
    if !(0.0..=1.0).contains(&strength) || horizon == 0 || horizon >= days {
        return Err(DataError::InvalidParams(format!("strength={strength} horizon={horizon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bars = Bars::generate(&mut rng, days, stocks);
    let dates = business_days(days);
    let symbols: Vec<String> = (0..stocks).map(|i| format!("S{i:04}")).collect();
    let build = |features: Vec<(String, Panel)>| {
        Dataset::from_features(dates.clone(), symbols.clone(), features, horizon, &params.split)
    };
    let ones = Panel::ones((days, stocks));
    let base = build(bars.rescaled(&ones))?;
    let Some(tree) = params.planted.as_ref() else {
        return Ok(base);
    };
    if strength == 0.0 {
        return Ok(base);
    }
    let signal = standardize_rows(&evaluate(tree, &base)?);
    let with_shift = |kappa: f64| -> Result<(Dataset, f64), DataError> {
        let mut scale = Panel::ones((days, stocks));
        for t in horizon..days {
            for i in 0..stocks {
                scale[[t, i]] = (kappa * signal[[t - horizon, i]]).exp();
            }
        }
        let ds = build(bars.rescaled(&scale))?;
        let z = evaluate(tree, &ds)?;
        let ic = metrics::ic(z.view(), ds.target.view()).unwrap_or(f64::NAN);
        Ok((ds, ic))
    };
    let (mut lo, mut hi) = (0.0, 0.02);
    loop {
        let (_, ic) = with_shift(hi)?;
        if ic >= strength {
            break;
        }
        if !ic.is_finite() || hi > 4.0 {
            return Err(DataError::InvalidParams(format!(
                "planted alpha cannot reach IC {strength} (got {ic:.4})"
            )));
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (_, ic) = with_shift(mid)?;
        if ic < strength {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(with_shift(hi)?.0)
}

pub fn default_feature_names() -> Vec<String> {
    DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect()
}
