//! Run configuration: one TOML file, every field overridable by dotted
//! `key=value` pairs, validated on load.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::balance_sheet::{FrictionParams, LegacyConfig};
use crate::data::BetaUnits;
use crate::scenarios::EquityParams;
use crate::strategies::PolicyInit;
use crate::termstructure::STANDARD_MATURITIES;
use crate::training::{ObjectiveKind, ObjectiveSpec, OptimizerConfig};

/// Keys that may be absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 2] = ["data.ecb_csv", "objective.horizon"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Svensson parameter CSV; the bundled synthetic history when absent.
    pub ecb_csv: Option<PathBuf>,
    pub beta_units: BetaUnits,
    pub anchor: NaiveDate,
    /// Length of the daily calibration window ending at the anchor.
    pub pca_window_years: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub months: usize,
    pub n_factors: usize,
    pub trading_days_per_month: usize,
    pub maturities: Vec<usize>,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiabilityConfig {
    pub a: f64,
    pub b: f64,
    pub face: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub train_count: usize,
    pub validation_count: usize,
    pub eval_count: usize,
    pub train_seed: u64,
    pub validation_seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Parent of the per-config run directories.
    pub dir: PathBuf,
    pub histogram_bins: usize,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub liabilities: LiabilityConfig,
    pub equity: EquityParams,
    pub frictions: FrictionParams,
    pub legacy: LegacyConfig,
    pub policy_init: PolicyInit,
    pub objective: ObjectiveSpec,
    pub optimizer: OptimizerConfig,
    pub scenarios: ScenarioConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                ecb_csv: None,
                beta_units: BetaUnits::Auto,
                anchor: NaiveDate::from_ymd_opt(2007, 12, 31).expect("valid"),
                pca_window_years: 8,
            },
            model: ModelConfig {
                months: 120,
                n_factors: 3,
                trading_days_per_month: 22,
                maturities: STANDARD_MATURITIES.to_vec(),
                hidden: 15,
            },
            liabilities: LiabilityConfig { a: 1.5, b: 2.5, face: 100.0 },
            equity: EquityParams::default(),
            frictions: FrictionParams::default(),
            legacy: LegacyConfig::default(),
            policy_init: PolicyInit { weight_gain: 0.1, output_bias: 0.0, seed: 7 },
            objective: ObjectiveSpec::default(),
            optimizer: OptimizerConfig {
                learning_rate: 3e-4,
                batch_size: 100,
                epochs: 40,
                seed: 11,
                ..OptimizerConfig::default()
            },
            scenarios: ScenarioConfig {
                train_count: 2000,
                validation_count: 500,
                eval_count: 2000,
                train_seed: 1,
                validation_seed: 2,
                eval_seed: 3,
            },
            output: OutputConfig { dir: PathBuf::from("runs"), histogram_bins: 50, svg: true },
        }
    }
}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Overlays `src` onto `dst`, refusing keys `dst` does not know.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (key, value) in src {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (dst.get_mut(&key), value) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                dst.insert(key, v);
            }
            (None, _) => return Err(ConfigError::UnknownKey(path)),
        }
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut nested = Table::new();
    nested.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    for part in parts[..parts.len() - 1].iter().rev() {
        let mut outer = Table::new();
        outer.insert(part.to_string(), Value::Table(nested));
        nested = outer;
    }
    merge(table, nested, "")
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = defaults_table();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
            let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
            merge(&mut table, file, "")?;
            // relative data paths are taken relative to the config file
            if let Some(Value::String(p)) = table.get_mut("data").and_then(|d| d.get_mut("ecb_csv")) {
                if Path::new(p.as_str()).is_relative() {
                    if let Some(dir) = path.parent() {
                        *p = dir.join(p.as_str()).to_string_lossy().into_owned();
                    }
                }
            }
        }
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.model;
        if m.months == 0 {
            return bad("model.months must be positive".into());
        }
        if m.maturities.is_empty() {
            return bad("model.maturities is empty".into());
        }
        for &k in &m.maturities {
            if !STANDARD_MATURITIES.contains(&k) || k > m.months {
                return bad(format!("maturity {k} unsupported for a {}-month grid", m.months));
            }
        }
        if m.n_factors > m.months || m.trading_days_per_month == 0 || m.hidden == 0 {
            return bad("model.n_factors, trading_days_per_month or hidden out of range".into());
        }
        let l = &self.liabilities;
        if !(l.a > 0.0 && l.b > 0.0 && l.face > 0.0 && l.face.is_finite()) {
            return bad(format!("liabilities need a, b, face > 0 (got {l:?})"));
        }
        self.equity.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let f = &self.frictions;
        if !(f.transaction_cost >= 0.0 && f.penalty_rate >= 0.0 && (0.0..=1.0).contains(&f.liquidity_floor)) {
            return bad(format!("frictions out of range: {f:?}"));
        }
        let lg = &self.legacy;
        if !(lg.total_assets > 0.0 && lg.tranche_face >= 0.0 && (0.0..=1.0).contains(&lg.stock_fraction)) {
            return bad(format!("legacy parameters out of range: {lg:?}"));
        }
        let o = &self.objective;
        if !(o.epsilon > 0.0) || (o.kind == ObjectiveKind::IsoElastic && !(o.gamma > 0.0)) {
            return bad("objective needs epsilon > 0 and gamma > 0".into());
        }
        if o.horizon.is_some_and(|h| h == 0 || h > m.months) {
            return bad(format!("objective.horizon must lie in 1..={}", m.months));
        }
        self.optimizer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.scenarios;
        if s.train_count == 0 || s.validation_count == 0 || s.eval_count == 0 {
            return bad("scenario counts must be positive".into());
        }
        if s.train_seed == s.validation_seed || s.train_seed == s.eval_seed || s.validation_seed == s.eval_seed {
            return bad(format!(
                "train, validation and evaluation seeds must differ (got {}, {}, {})",
                s.train_seed, s.validation_seed, s.eval_seed
            ));
        }
        if self.output.histogram_bins == 0 || self.data.pca_window_years == 0 {
            return bad("output.histogram_bins and data.pca_window_years must be positive".into());
        }
        Ok(())
    }

    /// Short digest of everything that affects results; the output
    /// location is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(format!("run-{}", self.hash()))
    }
}
