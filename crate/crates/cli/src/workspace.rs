//! Loaded data, train/test split, refit schedule and the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mmlp_core::data::{self, FeatureMatrix, IngestOptions, ReturnsPanel};
use mmlp_core::mace::{self, BagOfStrategies, MaceModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub mod files {
    pub const CONFIG: &str = "config.resolved.toml";
    pub const MODEL: &str = "model.json";
    pub const BAG: &str = "bag.json";
    pub const HISTORY: &str = "history.csv";
    pub const METRICS: &str = "metrics.json";
    pub const TC_SWEEP: &str = "tc_sweep.csv";
    pub const BASELINE: &str = "baseline.csv";
    pub const BASELINE_SUMMARY: &str = "baseline_summary.json";
    pub const SHAPLEY: &str = "shapley.csv";
    pub const VI: &str = "vi.json";
    pub const TIMELINE: &str = "timeline.csv";
    pub const REPORT_TEXT: &str = "report.txt";
    pub const REPORT_CSV: &str = "report.csv";
    pub const MANIFEST: &str = "manifest.json";

    pub fn backtest(strategy: &str) -> String {
        format!("backtest_{strategy}.csv")
    }
}

/// Returns rows paired with the information available when each was
/// forecast. In exogenous mode feature row `t` predicts return row `t`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub panel: ReturnsPanel,
    pub features: Option<FeatureMatrix>,
    pub benchmark: Option<Vec<f64>>,
    /// First test row.
    pub split: usize,
    pub horizon: usize,
}

impl Workspace {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut side = Vec::new();
        side.extend(cfg.data.benchmark_column.iter().cloned());
        side.extend(cfg.data.risk_free_column.iter().cloned());
        let options = IngestOptions {
            missing: cfg.data.missing,
            side_columns: side,
            risk_free_column: cfg.data.risk_free_column.clone(),
            subtract_risk_free: cfg.data.subtract_risk_free,
        };
        let (raw, report) = data::load_returns_csv(&cfg.data.returns, &options)?;
        let benchmark_raw = cfg
            .data
            .benchmark_column
            .as_ref()
            .map(|c| report.side_columns.get(c).cloned().ok_or_else(|| data::DataError::UnknownColumn(c.clone())))
            .transpose()?;

        let horizon = cfg.mace.horizon.get();
        let (panel, features) = match &cfg.data.features {
            Some(path) => {
                let mut x = data::load_features_csv(path, cfg.data.missing)?;
                if cfg.data.feature_lags > 1 {
                    x = data::stack_lags(&x, cfg.data.feature_lags)?;
                }
                let aligned = data::pair_with_horizon(&raw, &x, cfg.mace.horizon)?;
                (aligned.returns, Some(aligned.features))
            }
            None => (raw.clone(), None),
        };
        let benchmark = benchmark_raw.map(|b| {
            panel
                .dates()
                .iter()
                .map(|d| b[raw.position_of(d).expect("aligned dates come from the raw panel")])
                .collect()
        });
        let split = split_row(&panel, cfg)?;
        Ok(Self {
            panel,
            features,
            benchmark,
            split,
            horizon,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.panel.n_periods()
    }

    pub fn exogenous(&self) -> bool {
        self.features.is_some()
    }

    /// Rows usable for training a model whose first forecast is `start`.
    pub fn train_rows(&self, start: usize) -> usize {
        train_rows(start, self.horizon, self.exogenous())
    }

    pub fn windows(&self, cfg: &RunConfig) -> Vec<Window> {
        schedule(self.split, self.n_rows(), cfg.schedule.step, cfg.schedule.expanding)
    }

    pub fn train_panel(&self, rows: usize) -> Result<ReturnsPanel> {
        Ok(self.panel.slice_rows(0..rows)?)
    }

    pub fn train_features(&self, rows: usize) -> Result<Option<FeatureMatrix>> {
        self.features
            .as_ref()
            .map(|x| {
                FeatureMatrix::new(
                    x.dates()[..rows].to_vec(),
                    x.names().to_vec(),
                    x.values().rows(0, rows).into_owned(),
                )
            })
            .transpose()
            .map_err(CliError::from)
    }
}

fn split_row(panel: &ReturnsPanel, cfg: &RunConfig) -> Result<usize> {
    let t = panel.n_periods();
    let split = match &cfg.schedule.train_end {
        Some(d) => {
            panel
                .position_of(d)
                .ok_or_else(|| CliError::Config(format!("schedule.train_end {d:?} is not a date of the sample")))?
                + 1
        }
        None => (cfg.schedule.train_fraction * t as f64).round() as usize,
    };
    if split < 2 || split + 2 > t {
        return Err(CliError::Config(format!(
            "train/test split at row {split} of {t} leaves too little data on one side"
        )));
    }
    Ok(split)
}

/// Training rows for a model first used at row `start`: in exogenous mode
/// the last `h - 1` rows before it are not yet realized.
pub fn train_rows(start: usize, horizon: usize, exogenous: bool) -> usize {
    if exogenous {
        (start + 1).saturating_sub(horizon)
    } else {
        start
    }
}

/// Rows `start..end` traded with one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// One window over the whole test range, or consecutive `step`-row windows
/// refit on an expanding sample.
pub fn schedule(split: usize, total: usize, step: usize, expanding: bool) -> Vec<Window> {
    if !expanding {
        return vec![Window { start: split, end: total }];
    }
    (split..total)
        .step_by(step)
        .map(|start| Window {
            start,
            end: (start + step).min(total),
        })
        .collect()
}

/// A fitted single model or a bag of them.
#[derive(Debug, Clone)]
pub enum Fitted {
    Single(MaceModel),
    Bag(BagOfStrategies),
}

impl Fitted {
    pub fn members(&self) -> Vec<&MaceModel> {
        match self {
            Self::Single(m) => vec![m],
            Self::Bag(b) => b.members.iter().collect(),
        }
    }

    pub fn fit(ws: &Workspace, cfg: &RunConfig, rows: usize) -> Result<Self> {
        let panel = ws.train_panel(rows)?;
        let x = ws.train_features(rows)?;
        Ok(if cfg.mace.bag_size > 1 {
            Self::Bag(mace::fit_bag(&panel, x.as_ref(), &cfg.mace)?)
        } else {
            Self::Single(mace::fit(&panel, x.as_ref(), &cfg.mace)?)
        })
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        match self {
            Self::Single(m) => m.save(&dir.path(files::MODEL))?,
            Self::Bag(b) => {
                let json = serde_json::to_vec(b).map_err(mace::MaceError::from)?;
                dir.write(files::BAG, &json)?;
            }
        }
        Ok(())
    }

    /// Loads `model.json` or `bag.json` from the run directory.
    pub fn load(dir: &RunDir) -> Result<Self> {
        let model = dir.path(files::MODEL);
        let bag = dir.path(files::BAG);
        if model.exists() {
            Ok(Self::Single(MaceModel::load(&model)?))
        } else if bag.exists() {
            let bytes = std::fs::read(&bag).map_err(|e| CliError::io(&bag, e))?;
            let b: BagOfStrategies = serde_json::from_slice(&bytes).map_err(mace::MaceError::from)?;
            for m in &b.members {
                if m.format_version != mace::MODEL_FORMAT_VERSION {
                    return Err(mace::MaceError::FormatVersion {
                        expected: mace::MODEL_FORMAT_VERSION,
                        found: m.format_version,
                    }
                    .into());
                }
            }
            Ok(Self::Bag(b))
        } else {
            Err(CliError::io(
                &model,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no model artifact (run `mmlp fit` first)"),
            ))
        }
    }

    /// Checks the artifact was fit on this data's assets, features, mode
    /// and training window.
    pub fn check_compatible(&self, ws: &Workspace, cfg: &RunConfig) -> Result<()> {
        let rows = ws.train_rows(ws.split);
        for m in self.members() {
            if m.assets != ws.panel.assets() {
                return Err(CliError::Artifact(format!(
                    "model has {} assets {:?}, data has {} assets",
                    m.assets.len(),
                    m.assets.iter().take(3).collect::<Vec<_>>(),
                    ws.panel.n_assets()
                )));
            }
            if m.config.mode != cfg.mace.mode {
                return Err(CliError::Artifact(format!(
                    "model mode {:?} differs from config mode {:?}",
                    m.config.mode, cfg.mace.mode
                )));
            }
            if let Some(x) = &ws.features {
                if m.feature_names != x.names() {
                    return Err(CliError::Artifact(format!(
                        "model features {:?} differ from data features {:?}",
                        m.feature_names,
                        x.names()
                    )));
                }
            }
            if m.forest.n_features() != m.feature_names.len() {
                return Err(CliError::Artifact("forest width differs from its feature list".into()));
            }
            if m.f_hat.len() + m.offset != rows {
                return Err(CliError::Artifact(format!(
                    "model was trained on {} rows, the configured split implies {rows}",
                    m.f_hat.len() + m.offset
                )));
            }
        }
        Ok(())
    }
}

/// Output directory with fixed file names.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn snapshot(&self, cfg: &RunConfig) -> Result<()> {
        self.write(files::CONFIG, cfg.to_toml().as_bytes())
    }

    /// Rewrites `manifest.json` with the hash of every other file present.
    pub fn write_manifest(&self) -> Result<()> {
        let mut entries = BTreeMap::new();
        let listing = std::fs::read_dir(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        for entry in listing {
            let entry = entry.map_err(|e| CliError::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == files::MANIFEST || !entry.path().is_file() {
                continue;
            }
            let bytes = std::fs::read(entry.path()).map_err(|e| CliError::io(entry.path(), e))?;
            entries.insert(
                name,
                ManifestEntry {
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
        let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
        self.write(files::MANIFEST, json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expanding_schedule_refits_every_step() {
        for (split, total, step) in [(100, 160, 3), (100, 161, 3), (100, 162, 3), (10, 11, 3), (5, 50, 1)] {
            let w = schedule(split, total, step, true);
            assert_eq!(w.len(), (total - split).div_ceil(step));
            assert_eq!(w[0].start, split);
            assert_eq!(w.last().unwrap().end, total);
            for pair in w.windows(2) {
                assert_eq!(pair[0].end, pair[1].start);
            }
            assert!(w.iter().all(|x| x.end - x.start <= step && x.end > x.start));
        }
        assert_eq!(schedule(100, 160, 3, false), vec![Window { start: 100, end: 160 }]);
    }

    #[test]
    fn training_rows_respect_horizon() {
        assert_eq!(train_rows(50, 1, true), 50);
        assert_eq!(train_rows(50, 3, true), 48);
        assert_eq!(train_rows(50, 3, false), 50);
    }

    #[test]
    fn manifest_hashes_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        run.write("a.txt", b"abc").unwrap();
        run.write("b.txt", b"").unwrap();
        run.write_manifest().unwrap();
        let m: BTreeMap<String, ManifestEntry> =
            serde_json::from_slice(&std::fs::read(run.path(files::MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["a.txt"].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m["b.txt"].bytes, 0);
    }
}
