//! Text format for mined alpha sets.
//!
//! Blocks are separated by blank lines. Each block has `# key: value`
//! metadata lines followed by the program, one instruction per line.

use std::fmt::Write as _;
use std::ops::Range;

use crate::data::Dataset;
use crate::evaluator::{fingerprint, EvalContext};
use crate::metrics::{self, AlphaRecord, MinedAlphaSet};
use crate::program::{AlphaProgram, InstructionSet};

use super::CliError;

fn fmt_metric(v: f64) -> String {
    if v.is_finite() { v.to_string() } else { "nan".into() }
}

/// Renders the set; `ic_valid` is computed over `valid_rows`.
pub fn render(set: &MinedAlphaSet, dataset: &Dataset, valid_rows: Range<usize>) -> Result<String, CliError> {
    let mut out = String::new();
    for (i, r) in set.records().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let ic_valid = if valid_rows.is_empty() {
            f64::NAN
        } else {
            metrics::ic(
                r.values.slice(ndarray::s![valid_rows.clone(), ..]),
                dataset.target.slice(ndarray::s![valid_rows.clone(), ..]),
            )
            .map_err(|e| CliError::Internal(e.to_string()))?
        };
        writeln!(out, "# alpha: {}", i + 1).expect("string write");
        writeln!(out, "# expr: {}", r.tree).expect("string write");
        writeln!(out, "# ic_train: {}", fmt_metric(r.ic)).expect("string write");
        writeln!(out, "# ic_valid: {}", fmt_metric(ic_valid)).expect("string write");
        writeln!(out, "# perf: {}", fmt_metric(r.perf)).expect("string write");
        out.push_str(&r.program.serialize());
        out.push('\n');
    }
    Ok(out)
}

/// One parsed block: the program and its recorded mining-time Perf.
#[derive(Clone, Debug, PartialEq)]
pub struct MinedEntry {
    pub program: AlphaProgram,
    pub perf: f64,
}

pub fn parse(text: &str, iset: &InstructionSet) -> Result<Vec<MinedEntry>, CliError> {
    let mut entries = Vec::new();
    let mut lines: Vec<(usize, &str)> = Vec::new();
    let mut perf = f64::NAN;
    let mut flush = |lines: &mut Vec<(usize, &str)>, perf: &mut f64| -> Result<(), CliError> {
        if lines.is_empty() {
            return Ok(());
        }
        let first = lines[0].0;
        let body: Vec<&str> = lines.iter().map(|l| l.1).collect();
        let program = iset.parse_program(&body.join("\n")).map_err(|e| {
            CliError::Data(format!("mined set block starting at line {first}: {e}"))
        })?;
        iset.compile(&program)
            .map_err(|e| CliError::Data(format!("mined set block starting at line {first}: {e}")))?;
        entries.push(MinedEntry { program, perf: *perf });
        lines.clear();
        *perf = f64::NAN;
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            flush(&mut lines, &mut perf)?;
        } else if let Some(meta) = t.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("perf:") {
                perf = v.trim().parse().unwrap_or(f64::NAN);
            }
        } else {
            lines.push((i + 1, t));
        }
    }
    flush(&mut lines, &mut perf)?;
    Ok(entries)
}

/// Rebuilds records by compiling and evaluating each program; train IC is
/// recomputed over `train_rows`.
pub fn load_set(
    text: &str,
    iset: &InstructionSet,
    ctx: &EvalContext,
    train_rows: Range<usize>,
) -> Result<MinedAlphaSet, CliError> {
    let mut set = MinedAlphaSet::new();
    let target = &ctx.dataset().target;
    for entry in parse(text, iset)? {
        let tree = iset.compile(&entry.program).map_err(|e| CliError::Data(e.to_string()))?;
        let values = ctx.evaluate(&tree).map_err(|e| CliError::Data(e.to_string()))?;
        let ic = metrics::ic(
            values.slice(ndarray::s![train_rows.clone(), ..]),
            target.slice(ndarray::s![train_rows.clone(), ..]),
        )
        .map_err(|e| CliError::Internal(e.to_string()))?;
        set.add(AlphaRecord {
            program: entry.program,
            fingerprint: fingerprint(&tree),
            tree,
            values,
            ic,
            perf: entry.perf,
        });
    }
    Ok(set)
}
