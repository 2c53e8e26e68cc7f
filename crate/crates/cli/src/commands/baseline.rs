use mmlp_core::mace::{derive_seed, FeatureMode};
use mmlp_core::metrics::{self, BaselineFeatures, BaselineSpec, DrawKind};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::workspace::{files, Fitted, RunDir, Workspace};

use super::{mean, progress};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub n_random: usize,
    pub n_single_stock: usize,
    pub median_random_oos_r2: f64,
    pub model_oos_r2: Option<f64>,
    /// Share of random draws with a test R² below the model's.
    pub model_percentile: Option<f64>,
    pub top_in_sample_id: Option<usize>,
    pub top_in_sample_oos_r2: Option<f64>,
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    dir.snapshot(cfg)?;
    let features = match (&ws.features, cfg.mace.mode) {
        (Some(x), _) => BaselineFeatures::Exogenous(x.values()),
        (None, FeatureMode::EndogenousLags { max_lag, marx }) => BaselineFeatures::Lags {
            max_lag,
            marx,
            horizon: ws.horizon,
        },
        (None, FeatureMode::Exogenous) => unreachable!("validated config"),
    };
    let split = ws.train_rows(ws.split);
    progress(format!(
        "fitting {} random and {} single-asset portfolios",
        cfg.baseline.n_random,
        ws.panel.n_assets()
    ));
    let dist = metrics::random_baseline(
        ws.panel.values(),
        &BaselineSpec {
            features,
            n_random: cfg.baseline.n_random,
            nonneg: cfg.baseline.nonneg,
            forest: mmlp_core::forest::ForestConfig {
                seed: derive_seed(cfg.seed, 4_000_000),
                ..cfg.mace.forest.clone()
            },
            split,
            seed: cfg.seed,
        },
    )?;
    dist.write_csv(&dir.path(files::BASELINE))?;

    let model_r2 = match Fitted::load(&dir) {
        Ok(fitted) => {
            fitted.check_compatible(&ws, cfg)?;
            Some(model_oos_r2(&ws, &fitted)?)
        }
        Err(CliError::Io { .. }) => None,
        Err(e) => return Err(e),
    };
    let random = dist.random_oos();
    let top = dist.top_in_sample.map(|i| &dist.draws[i]);
    let summary = BaselineSummary {
        n_random: random.len(),
        n_single_stock: dist.draws.iter().filter(|d| matches!(d.kind, DrawKind::SingleStock(_))).count(),
        median_random_oos_r2: metrics::median(&random),
        model_oos_r2: model_r2,
        model_percentile: model_r2.map(|r| dist.percentile_of(r)),
        top_in_sample_id: top.map(|d| d.id),
        top_in_sample_oos_r2: top.map(|d| d.fit.oos_r2),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    dir.write(files::BASELINE_SUMMARY, json.as_bytes())?;
    dir.write_manifest()
}

/// Test R² of the artifact on the fixed split, averaged over bag members.
fn model_oos_r2(ws: &Workspace, fitted: &Fitted) -> Result<f64> {
    let (split, t) = (ws.split, ws.n_rows());
    let train = ws.train_rows(split);
    let returns = ws.panel.values();
    let x = ws.features.as_ref().map(|f| f.values().clone());
    let mut total = 0.0;
    let members = fitted.members();
    for m in &members {
        let w = m.traded_weights();
        let z = mmlp_core::data::portfolio_returns(returns, &w);
        let fc = m.forecast(returns, x.as_ref())?;
        let pm_value = mean(&z[..train]);
        let (mut y, mut yhat) = (Vec::new(), Vec::new());
        for row in split..t {
            if let Some(f) = fc[row] {
                y.push(z[row]);
                yhat.push(f * m.traded_scale());
            }
        }
        total += metrics::oos_r2(&y, &yhat, &vec![pm_value; y.len()])?;
    }
    Ok(total / members.len() as f64)
}
