//! Command-line front end: `synth | mine | eval | backtest`.

pub mod config;
pub mod mined_file;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{self, DataError, Dataset, Split, SynthParams};
use crate::evaluator::{self, EvalContext};
use crate::expr::parse_expr;
use crate::metrics;
use crate::search::{self, GuidanceModel, UniformGuidance};
use crate::strategy::{self, CombinerModel, StrategyError};

pub use config::{GuidanceKind, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidParams(m) => CliError::Config(m),
            DataError::Eval(e) => CliError::Internal(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> Self {
        match e {
            StrategyError::InvalidConfig(m) => CliError::Config(m),
            StrategyError::Metrics(m) => CliError::Internal(m.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "alphaprog", version, about = "Mine formulaic alphas with guided tree search")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic market CSV.
    Synth(SynthArgs),
    /// Search for alphas and write the mined set.
    Mine(MineArgs),
    /// Report IC, rank IC and pairwise correlations of a mined set.
    Eval(EvalArgs),
    /// Combine mined alphas and backtest a top-k/drop-n portfolio.
    Backtest(BacktestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub stocks: Option<usize>,
    /// Expression to plant, e.g. "(close-open)/(high-low)".
    #[arg(long)]
    pub plant: Option<String>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub alphas: Option<usize>,
    #[arg(long)]
    pub ic_threshold: Option<f64>,
    #[arg(long, value_parser = ["mlp", "uniform"])]
    pub guidance: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub mined: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub mined: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub drop_n: Option<usize>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    match command {
        Command::Synth(a) => {
            set(&mut cfg.synth.seed, &a.seed);
            set(&mut cfg.synth.days, &a.days);
            set(&mut cfg.synth.stocks, &a.stocks);
            set(&mut cfg.synth.strength, &a.strength);
            if a.plant.is_some() {
                cfg.synth.plant = a.plant.clone();
            }
            set(&mut cfg.data.path, &a.out);
        }
        Command::Mine(a) => {
            set(&mut cfg.data.path, &a.data);
            set(&mut cfg.output.mined, &a.out);
            set(&mut cfg.output.log, &a.log);
            set(&mut cfg.search.seed, &a.seed);
            set(&mut cfg.search.max_episodes, &a.episodes);
            set(&mut cfg.search.alphas_to_mine, &a.alphas);
            set(&mut cfg.search.ic_threshold, &a.ic_threshold);
            if let Some(g) = &a.guidance {
                cfg.mdp.guidance = if g == "uniform" { GuidanceKind::Uniform } else { GuidanceKind::Mlp };
            }
        }
        Command::Eval(a) => {
            set(&mut cfg.output.mined, &a.mined);
            set(&mut cfg.data.path, &a.data);
        }
        Command::Backtest(a) => {
            set(&mut cfg.output.mined, &a.mined);
            set(&mut cfg.data.path, &a.data);
            set(&mut cfg.output.backtest, &a.out);
            set(&mut cfg.strategy.top_k, &a.top_k);
            set(&mut cfg.strategy.drop_n, &a.drop_n);
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &cli.command {
        apply_overrides(&mut cfg, c);
    }
    cfg.validate().map_err(CliError::Config)?;
    if cli.print_config {
        write!(out, "{}", cfg.to_toml()).map_err(|e| CliError::Internal(e.to_string()))?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given (synth, mine, eval or backtest)".into()));
    };
    match command {
        Command::Synth(_) => cmd_synth(&cfg, out),
        Command::Mine(_) => cmd_mine(&cfg, out, err),
        Command::Eval(a) => cmd_eval(&cfg, a.split, out),
        Command::Backtest(_) => cmd_backtest(&cfg, out),
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<(), CliError> {
    out.write_fmt(text).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = &cfg.data.path;
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file", path.display())));
    }
    Ok(data::load_csv(path, &cfg.program.features, cfg.data.horizon, &cfg.data.split)?)
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let planted = match &cfg.synth.plant {
        Some(text) => Some(parse_expr(text).map_err(|e| CliError::Config(format!("--plant: {e}")))?),
        None => None,
    };
    let params = SynthParams {
        seed: cfg.synth.seed,
        days: cfg.synth.days,
        stocks: cfg.synth.stocks,
        planted: planted.clone(),
        strength: cfg.synth.strength,
        horizon: cfg.data.horizon,
        split: cfg.data.split.clone(),
    };
    let ds = data::synth_market(&params)?;
    ds.save_csv(&cfg.data.path)?;
    emit(
        out,
        format_args!(
            "wrote {} ({} days x {} stocks x {} features)\n",
            cfg.data.path.display(),
            ds.days(),
            ds.stocks(),
            ds.features.len()
        ),
    )?;
    if let Some(tree) = planted {
        let z = evaluator::evaluate(&tree, &ds).map_err(|e| CliError::Config(e.to_string()))?;
        let all = metrics::ic(z.view(), ds.target.view()).map_err(|e| CliError::Internal(e.to_string()))?;
        let rows = ds.splits.train.clone();
        let train = metrics::ic(
            z.slice(ndarray::s![rows.clone(), ..]),
            ds.target.slice(ndarray::s![rows, ..]),
        )
        .map_err(|e| CliError::Internal(e.to_string()))?;
        emit(out, format_args!("planted {tree}: ic {all:.4} (train {train:.4})\n"))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn cmd_mine(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let iset = cfg.instruction_set();
    let ctx = EvalContext::new(&ds);
    let mdp = cfg.mdp_config(ds.splits.train.clone());
    let mut guidance: Box<dyn GuidanceModel> = match cfg.mdp.guidance {
        GuidanceKind::Mlp => {
            let mut m = search::default_guidance(&iset, cfg.search.seed);
            m.learning_rate = cfg.search.learning_rate;
            Box::new(m)
        }
        GuidanceKind::Uniform => Box::new(UniformGuidance::new(iset.actions().len())),
    };
    let log_path = &cfg.output.log;
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log = BufWriter::new(File::create(log_path).map_err(|e| io_err(log_path, e))?);
    let outcome = search::mine(&ctx, &iset, &mdp, &cfg.search, guidance.as_mut(), Some(&mut log))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    log.flush().map_err(|e| io_err(log_path, e))?;
    let text = mined_file::render(&outcome.mined, &ds, ds.splits.valid.clone())?;
    write_file(&cfg.output.mined, text.as_bytes())?;
    if outcome.mined.is_empty() {
        let _ = writeln!(
            err,
            "warning: no alpha reached ic_threshold {} in {} episodes",
            cfg.search.ic_threshold, outcome.episodes
        );
    }
    let best = if outcome.best_ic.is_finite() { format!("{:.4}", outcome.best_ic) } else { "n/a".into() };
    emit(
        out,
        format_args!(
            "mined {} alphas in {} episodes (best train ic {best}); wrote {}\n",
            outcome.mined.len(),
            outcome.episodes,
            cfg.output.mined.display()
        ),
    )
}

/// Per-alpha metrics on one split plus the pairwise correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub exprs: Vec<String>,
    pub ic: Vec<f64>,
    pub rank_ic: Vec<f64>,
    /// `corr[i][j]` is the IC between alphas `i` and `j`.
    pub corr: Vec<Vec<f64>>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl EvalReport {
    pub fn compute(set: &metrics::MinedAlphaSet, ds: &Dataset, split: Split) -> Result<Self, CliError> {
        let rows = ds.rows(split);
        fn cut<'p>(p: &'p data::Panel, rows: &std::ops::Range<usize>) -> ndarray::ArrayView2<'p, f64> {
            p.slice(ndarray::s![rows.clone(), ..])
        }
        let view = |p| cut(p, &rows);
        let mu = view(&ds.target);
        let recs = set.records();
        let internal = |e: metrics::MetricsError| CliError::Internal(e.to_string());
        let mut report = EvalReport { exprs: Vec::new(), ic: Vec::new(), rank_ic: Vec::new(), corr: Vec::new() };
        for r in recs {
            let z = view(&r.values);
            report.exprs.push(r.tree.to_string());
            report.ic.push(metrics::ic(z, mu).map_err(internal)?);
            report.rank_ic.push(metrics::rank_ic(z, mu).map_err(internal)?);
        }
        for a in recs {
            let mut row = Vec::new();
            for b in recs {
                row.push(metrics::ic(view(&a.values), view(&b.values)).map_err(internal)?);
            }
            report.corr.push(row);
        }
        Ok(report)
    }

    /// Off-diagonal upper-triangle correlations.
    pub fn pairwise(&self) -> Vec<f64> {
        let n = self.corr.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.corr[i][j]).collect()
    }

    pub fn render(&self, split: Split) -> String {
        let mut s = String::new();
        let split = format!("{split:?}").to_lowercase();
        s.push_str(&format!("split: {split}\n\n"));
        s.push_str("alpha\tic\trank_ic\texpr\n");
        for i in 0..self.ic.len() {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{}\n", i + 1, self.ic[i], self.rank_ic[i], self.exprs[i]));
        }
        s.push_str("\ncorrelations\n");
        if self.corr.len() > 1 {
            for row in &self.corr {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                s.push_str(&cells.join("\t"));
                s.push('\n');
            }
        }
        let fmt = |(m, sd): (f64, f64)| format!("{m:.6} ± {sd:.6}");
        s.push_str(&format!("\nic: {}\n", fmt(mean_std(&self.ic))));
        s.push_str(&format!("rank_ic: {}\n", fmt(mean_std(&self.rank_ic))));
        s.push_str(&format!("correlation: {}\n", fmt(mean_std(&self.pairwise()))));
        s
    }
}

fn load_mined(cfg: &RunConfig, ds: &Dataset, ctx: &EvalContext) -> Result<metrics::MinedAlphaSet, CliError> {
    let path = &cfg.output.mined;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    mined_file::load_set(&text, &cfg.instruction_set(), ctx, ds.splits.train.clone())
}

pub fn cmd_eval(cfg: &RunConfig, split: Split, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let ctx = EvalContext::new(&ds);
    let set = load_mined(cfg, &ds, &ctx)?;
    let report = EvalReport::compute(&set, &ds, split)?;
    emit(out, format_args!("{}", report.render(split)))
}

pub fn cmd_backtest(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let ctx = EvalContext::new(&ds);
    let set = load_mined(cfg, &ds, &ctx)?;
    if set.is_empty() {
        return Err(CliError::Data(format!("{}: mined set is empty", cfg.output.mined.display())));
    }
    let (model, chosen) = strategy::combine_fit(&set, &ds, ds.splits.train.clone(), &cfg.strategy)?;
    let panels: Vec<&data::Panel> = chosen.iter().map(|&i| set.records()[i].values.as_ref()).collect();
    let signal = model.predict(&panels);
    let result = strategy::run_backtest(&signal, &ds, ds.splits.test.clone(), &cfg.strategy)?;
    let mut buf = Vec::new();
    result.write_csv(&ds, &mut buf)?;
    write_file(&cfg.output.backtest, &buf)?;
    let stats = result.stats()?;
    emit(
        out,
        format_args!(
            "alphas used: {}\ncumulative: {:.6}\nsharpe: {:.4}\nmdd: {:.6}\ntvr: {:.4}\nwrote {}\n",
            chosen.len(),
            stats.cumulative,
            stats.sharpe,
            stats.mdd,
            stats.tvr_mean,
            cfg.output.backtest.display()
        ),
    )
}
