//! Run configuration: one TOML file covering every stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, DEFAULT_HORIZON};
use crate::dimensions::{default_feature_dimensions, DimRules, Dimension, DEFAULT_MAX_EXPONENT};
use crate::env::MdpConfig;
use crate::metrics::PerfOptions;
use crate::program::{InstructionSet, DEFAULT_CONSTANTS, DEFAULT_FEATURES, DEFAULT_MAX_LEN, DEFAULT_REGISTERS};
use crate::search::SearchConfig;
use crate::strategy::StrategyConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub program: ProgramConfig,
    pub mdp: MdpSettings,
    pub search: SearchConfig,
    pub strategy: StrategyConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Market CSV read by mine / eval / backtest and written by synth.
    pub path: PathBuf,
    pub horizon: usize,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: "market.csv".into(), horizon: DEFAULT_HORIZON, split: SplitSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub days: usize,
    pub stocks: usize,
    /// Expression planted into the prices, e.g. `(close-open)/(high-low)`.
    pub plant: Option<String>,
    pub strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 1, days: 250, stocks: 50, plant: None, strength: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramConfig {
    pub features: Vec<String>,
    pub constants: Vec<f64>,
    pub registers: usize,
    pub max_len: usize,
    pub dimension_check: bool,
    pub max_exponent: i8,
    pub feature_dimensions: BTreeMap<String, Dimension>,
}

impl Default for ProgramConfig {
    fn default() -> Self {
        ProgramConfig {
            features: DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect(),
            constants: DEFAULT_CONSTANTS.to_vec(),
            registers: DEFAULT_REGISTERS,
            max_len: DEFAULT_MAX_LEN,
            dimension_check: true,
            max_exponent: DEFAULT_MAX_EXPONENT,
            feature_dimensions: default_feature_dimensions(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Mlp,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpSettings {
    pub gamma: f64,
    pub diversity: bool,
    pub abs_corr: bool,
    pub guidance: GuidanceKind,
}

impl Default for MdpSettings {
    fn default() -> Self {
        MdpSettings { gamma: 0.99, diversity: true, abs_corr: false, guidance: GuidanceKind::Mlp }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub mined: PathBuf,
    pub log: PathBuf,
    pub backtest: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            mined: "mined.txt".into(),
            log: "mine_log.jsonl".into(),
            backtest: "backtest.csv".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        RunConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = &self.program;
        if p.features.is_empty() {
            return Err("program.features is empty".into());
        }
        if !p.features.iter().any(|f| f == "close") {
            return Err("program.features must include close (the return target)".into());
        }
        for f in &p.features {
            if !p.feature_dimensions.contains_key(f) {
                return Err(format!("program.feature_dimensions has no entry for `{f}`"));
            }
        }
        if p.registers == 0 || p.registers > 16 {
            return Err("program.registers must lie in 1..=16".into());
        }
        if p.max_len < 3 {
            return Err("program.max_len must be at least 3".into());
        }
        if p.max_exponent <= 0 {
            return Err("program.max_exponent must be positive".into());
        }
        if p.constants.iter().any(|c| !c.is_finite()) {
            return Err("program.constants must be finite".into());
        }
        if !(self.mdp.gamma > 0.0 && self.mdp.gamma < 1.0) {
            return Err("mdp.gamma must lie in (0, 1)".into());
        }
        if self.data.horizon == 0 {
            return Err("data.horizon must be positive".into());
        }
        self.search.validate().map_err(|e| format!("search: {e}"))?;
        self.strategy.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn instruction_set(&self) -> InstructionSet {
        let p = &self.program;
        InstructionSet::new(
            &p.features,
            &p.constants,
            p.registers,
            p.max_len,
            DimRules::new(p.feature_dimensions.clone(), p.max_exponent),
        )
    }

    pub fn mdp_config(&self, rows: std::ops::Range<usize>) -> MdpConfig {
        MdpConfig {
            gamma: self.mdp.gamma,
            rows,
            perf: PerfOptions { diversity: self.mdp.diversity, abs_corr: self.mdp.abs_corr },
            dimension_check: self.program.dimension_check,
        }
    }
}
