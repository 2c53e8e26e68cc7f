//! Run configuration: a preset, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use mmlp_core::data::MissingPolicy;
use mmlp_core::mace::{FeatureMode, MaceConfig};
use mmlp_core::metrics::SliceSpec;
use mmlp_core::trading::TradingConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Preset {
    #[serde(rename = "daily-20")]
    #[value(name = "daily-20")]
    Daily20,
    #[serde(rename = "daily-100")]
    #[value(name = "daily-100")]
    Daily100,
    #[serde(rename = "monthly")]
    #[value(name = "monthly")]
    Monthly,
}

impl Preset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "daily-20" => Ok(Self::Daily20),
            "daily-100" => Ok(Self::Daily100),
            "monthly" => Ok(Self::Monthly),
            other => Err(CliError::Config(format!(
                "unknown preset {other:?} (expected daily-20, daily-100 or monthly)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dated returns CSV; side columns are removed from the asset set.
    pub returns: PathBuf,
    pub features: Option<PathBuf>,
    pub benchmark_column: Option<String>,
    pub risk_free_column: Option<String>,
    #[serde(default)]
    pub subtract_risk_free: bool,
    #[serde(default)]
    pub missing: MissingPolicy,
    /// Stack this many lags (current value included) of every feature.
    #[serde(default)]
    pub feature_lags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Last training date, inclusive. Overrides `train_fraction`.
    pub train_end: Option<String>,
    pub train_fraction: f64,
    /// Re-estimate every `step` periods on all data seen so far.
    pub expanding: bool,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub periods_per_year: u32,
    pub cost_grid: Vec<f64>,
    /// Omega threshold as a multiple of the benchmark's training mean.
    pub omega_threshold_multiple: f64,
    #[serde(default)]
    pub slices: Vec<SliceSpec>,
    /// Moving-average length for grouped volatility adjustment.
    pub vi_moving_average: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub n_random: usize,
    pub nonneg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Single seed for every random component of the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub mace: MaceConfig,
    pub trading: TradingConfig,
    pub evaluation: EvaluationConfig,
    pub baseline: BaselineConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (mace, trading, periods_per_year, cost_grid, expanding) = match p {
            Preset::Daily20 => (
                MaceConfig::daily_20(),
                TradingConfig::daily(),
                252,
                TradingConfig::daily_cost_grid().to_vec(),
                false,
            ),
            Preset::Daily100 => (
                MaceConfig::daily_100(),
                TradingConfig::daily(),
                252,
                TradingConfig::daily_cost_grid().to_vec(),
                false,
            ),
            Preset::Monthly => (
                MaceConfig::monthly(),
                TradingConfig::monthly(),
                12,
                TradingConfig::monthly_cost_grid().to_vec(),
                true,
            ),
        };
        Self {
            preset: p,
            seed: 0,
            output_dir: PathBuf::from("run"),
            data: DataConfig {
                returns: PathBuf::new(),
                features: None,
                benchmark_column: None,
                risk_free_column: None,
                subtract_risk_free: false,
                missing: MissingPolicy::Reject,
                feature_lags: 0,
            },
            schedule: ScheduleConfig {
                train_end: None,
                train_fraction: 0.7,
                expanding,
                step: 3,
            },
            mace,
            trading,
            evaluation: EvaluationConfig {
                periods_per_year,
                cost_grid,
                omega_threshold_multiple: 1.0,
                slices: Vec::new(),
                vi_moving_average: 12,
            },
            baseline: BaselineConfig {
                n_random: 150,
                nonneg: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.returns.as_os_str().is_empty() {
            return bad("data.returns is required".into());
        }
        if self.schedule.step == 0 {
            return bad("schedule.step must be at least 1".into());
        }
        if !(self.schedule.train_fraction > 0.0 && self.schedule.train_fraction < 1.0) {
            return bad("schedule.train_fraction must lie in (0, 1)".into());
        }
        if self.evaluation.periods_per_year == 0 {
            return bad("evaluation.periods_per_year must be positive".into());
        }
        if self.evaluation.cost_grid.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return bad("evaluation.cost_grid entries must be finite and non-negative".into());
        }
        if self.evaluation.vi_moving_average == 0 {
            return bad("evaluation.vi_moving_average must be positive".into());
        }
        if self.baseline.n_random == 0 {
            return bad("baseline.n_random must be positive".into());
        }
        match (self.mace.mode, &self.data.features) {
            (FeatureMode::Exogenous, None) => return bad("exogenous mode needs data.features".into()),
            (FeatureMode::EndogenousLags { .. }, Some(_)) => {
                return bad("data.features is only used in exogenous mode".into())
            }
            _ => {}
        }
        if self.data.subtract_risk_free && self.data.risk_free_column.is_none() {
            return bad("data.subtract_risk_free needs data.risk_free_column".into());
        }
        self.mace.validate()?;
        self.trading.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// `dotted.key=value`, the value parsed as TOML or else taken as a string.
    pub set: Vec<String>,
}

/// Tables merge key by key; anything else replaces. A table whose `kind`
/// changes is replaced whole so variant fields do not leak across.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dates stay strings since the data layer compares them as text.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")) {
        Some(Value::Datetime(_)) | None => Value::String(raw.to_owned()),
        Some(v) => v,
    }
}

fn apply_set(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key {key:?}")));
    }
    let mut nested = Table::new();
    nested.insert(parts[parts.len() - 1].to_owned(), parse_value(raw.trim()));
    for p in parts[..parts.len() - 1].iter().rev() {
        let mut outer = Table::new();
        outer.insert((*p).to_owned(), Value::Table(nested));
        nested = outer;
    }
    merge(table, nested);
    Ok(())
}

fn absolutize(path: &Path, base: &Path) -> PathBuf {
    let joined = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    std::path::absolute(&joined).unwrap_or(joined)
}

/// Resolves the effective configuration. Paths in the file are relative to
/// the file; paths from flags are relative to the working directory. The
/// result carries absolute paths so its snapshot reruns from anywhere.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let (mut user, file_dir) = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let table: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (Table::new(), PathBuf::new()),
    };
    let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
    let file_dir = absolutize(&file_dir, &cwd);

    let preset = match (overrides.preset, user.get("preset")) {
        (Some(p), _) => p,
        (None, Some(Value::String(s))) => Preset::parse(s)?,
        (None, Some(_)) => return Err(CliError::Config("preset must be a string".into())),
        (None, None) => Preset::Daily20,
    };
    user.remove("preset");

    let mut table = match Value::try_from(RunConfig::preset(preset)) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("presets serialize to a table"),
    };
    merge(&mut table, user);
    for s in &overrides.set {
        apply_set(&mut table, s)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.preset = preset;

    cfg.data.returns = absolutize(&cfg.data.returns, &file_dir);
    cfg.data.features = cfg.data.features.map(|p| absolutize(&p, &file_dir));
    cfg.output_dir = match &overrides.output_dir {
        Some(p) => absolutize(p, &cwd),
        None => absolutize(&cfg.output_dir, &file_dir),
    };
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.mace.seed = cfg.seed;
    cfg.mace.forest.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn presets_roundtrip_through_toml() {
        for p in [Preset::Daily20, Preset::Daily100, Preset::Monthly] {
            let mut cfg = RunConfig::preset(p);
            cfg.data.returns = "r.csv".into();
            let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let f = write_config(
            "preset = \"daily-100\"\nseed = 4\n[data]\nreturns = \"r.csv\"\n[mace]\ns_max = 7\n[mace.forest]\nn_trees = 12\n",
        );
        let ov = Overrides {
            seed: Some(9),
            set: vec!["mace.eta=0.5".into(), "trading.gamma=2".into()],
            ..Overrides::default()
        };
        let cfg = resolve(Some(f.path()), &ov).unwrap();
        assert_eq!(cfg.preset, Preset::Daily100);
        assert_eq!(cfg.mace.s_max, 7);
        assert_eq!(cfg.mace.forest.n_trees, 12);
        assert_eq!(cfg.mace.forest.min_node_size, MaceConfig::daily_100().forest.min_node_size);
        assert_eq!(cfg.mace.eta, 0.5);
        assert_eq!(cfg.trading.gamma, 2.0);
        assert_eq!((cfg.seed, cfg.mace.seed, cfg.mace.forest.seed), (9, 9, 9));
        assert!(cfg.data.returns.is_absolute());
        assert_eq!(cfg.data.returns.parent(), f.path().parent());
    }

    #[test]
    fn changing_variant_replaces_table() {
        let f = write_config(
            "preset = \"daily-20\"\n[data]\nreturns = \"r.csv\"\nfeatures = \"x.csv\"\n[mace.mode]\nkind = \"exogenous\"\n",
        );
        let cfg = resolve(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.mace.mode, FeatureMode::Exogenous);
    }

    #[test]
    fn snapshot_resolves_to_itself() {
        let f = write_config("preset = \"monthly\"\n[data]\nreturns = \"r.csv\"\nfeatures = \"x.csv\"\n");
        let cfg = resolve(Some(f.path()), &Overrides::default()).unwrap();
        let snap = write_config(&cfg.to_toml());
        assert_eq!(resolve(Some(snap.path()), &Overrides::default()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let f = write_config("[data]\nreturns = \"r.csv\"\n[mace]\netta = 0.3\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
        let f = write_config("[data]\nreturns = \"r.csv\"\n[schedule]\nstep = 0\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
        let f = write_config("preset = \"weekly\"\n");
        assert!(matches!(resolve(Some(f.path()), &Overrides::default()), Err(CliError::Config(_))));
    }

    #[test]
    fn set_parses_scalars_and_strings() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("2020-01-31"), Value::String("2020-01-31".into()));
        assert_eq!(parse_value("early-oob"), Value::String("early-oob".into()));
    }
}
