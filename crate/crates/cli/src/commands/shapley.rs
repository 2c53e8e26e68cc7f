use std::collections::BTreeMap;

use mmlp_core::data::{portfolio_returns, FeatureMatrix};
use mmlp_core::interpret::{self, ShapleyMatrix};
use mmlp_core::mace::{FeatureMode, MaceError, MaceModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::workspace::{files, Fitted, RunDir, Workspace};

use super::{head, progress};

/// Attribution error allowed relative to the prediction scale.
pub const LOCAL_ACCURACY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViReport {
    pub features: Vec<String>,
    pub vi: Vec<f64>,
    pub grouped: BTreeMap<String, f64>,
    pub adjusted: Option<Vec<f64>>,
    pub adjusted_grouped: Option<BTreeMap<String, f64>>,
    /// Why the adjusted figures are missing, when they are.
    pub adjusted_error: Option<String>,
    pub oos_start: String,
    pub oos_rows: usize,
    pub windows: usize,
    pub max_local_accuracy_gap: f64,
}

/// Features named `{base}_l{k}` group under `base`; endogenous lags form a
/// single `portfolio` group; anything else is its own group.
pub fn feature_groups(names: &[String], endogenous: bool) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in names {
        let key = if endogenous {
            "portfolio".to_owned()
        } else {
            match n.rsplit_once("_l") {
                Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => base.to_owned(),
                _ => n.clone(),
            }
        };
        groups.entry(key).or_default().push(n.clone());
    }
    groups
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let artifact = match Fitted::load(&dir)? {
        Fitted::Single(m) => m,
        Fitted::Bag(_) => return Err(CliError::Config("shapley needs a single model (mace.bag_size = 1)".into())),
    };
    Fitted::Single(artifact.clone()).check_compatible(&ws, cfg)?;
    dir.snapshot(cfg)?;

    let windows = ws.windows(cfg);
    let returns = ws.panel.values();
    let x_all = ws.features.as_ref().map(|f| f.values().clone());
    let mut parts = Vec::with_capacity(windows.len());
    let mut vi_windows = Vec::with_capacity(windows.len());
    let mut max_gap: f64 = 0.0;
    let mut first_row = 0;
    let mut design: Option<(nalgebra::DMatrix<f64>, usize)> = None;
    for (i, win) in windows.iter().enumerate() {
        let refit;
        let model: &MaceModel = if i == 0 {
            &artifact
        } else {
            progress(format!("refit {}/{}", i + 1, windows.len()));
            refit = match Fitted::fit(&ws, cfg, ws.train_rows(win.start))? {
                Fitted::Single(m) => m,
                Fitted::Bag(_) => unreachable!("bag size checked above"),
            };
            &refit
        };
        let (x, skip) = model.feature_rows(&head(returns, win.end), x_all.as_ref().map(|m| head(m, win.end)).as_ref())?;
        let from = if i == 0 { skip } else { win.start };
        if i == 0 {
            first_row = skip;
            let (full, _) = model.feature_rows(returns, x_all.as_ref())?;
            design = Some((full, skip));
        }
        let xw = x.rows(from - skip, win.end - from).into_owned();
        let values = interpret::tree_shapley_matrix(&model.forest, &xw)?;
        let preds = model.forest.predict(&xw).map_err(|source| MaceError::Forest { iteration: 0, source })?;
        let part = ShapleyMatrix {
            dates: ws.panel.dates()[from..win.end].to_vec(),
            names: model.feature_names.clone(),
            values,
            baseline: interpret::forest_baseline(&model.forest),
        };
        let scale = preds.iter().fold(1.0f64, |a, p| a.max(p.abs()));
        max_gap = max_gap.max(part.local_accuracy_gap(&preds) / scale);
        parts.push(part);
        vi_windows.push((win.start - 1 - first_row, win.end - 1 - first_row));
    }
    let shap = ShapleyMatrix::concat(&parts)?;
    shap.write_csv(&dir.path(files::SHAPLEY))?;

    let endogenous = matches!(cfg.mace.mode, FeatureMode::EndogenousLags { .. });
    let groups = feature_groups(&shap.names, endogenous);
    let vi = interpret::vi_oos(&shap, &vi_windows)?;
    let grouped = interpret::vi_grouped(&shap, &groups, &vi_windows)?;

    let oos_from = ws.split - first_row;
    let n_rows = shap.n_rows();
    let (design, skip) = design.expect("at least one window");
    let rows = design.rows(first_row - skip, n_rows).into_owned();
    let fm = FeatureMatrix::new(shap.dates.clone(), shap.names.clone(), rows)?;
    let indicators: BTreeMap<String, Vec<f64>> = if endogenous {
        let z = portfolio_returns(returns, &artifact.w.w);
        BTreeMap::from([("portfolio".to_owned(), z[first_row..].to_vec())])
    } else {
        groups
            .iter()
            .map(|(g, members)| {
                let base = members.iter().find(|m| m.ends_with("_l0")).unwrap_or(&members[0]);
                (g.clone(), fm.column(base).expect("member of the design"))
            })
            .collect()
    };
    let adjusted = interpret::vi_adjusted(&vi, &fm, 0..oos_from, oos_from..n_rows).and_then(|a| {
        let g = interpret::vi_adjusted_grouped(
            &grouped,
            &indicators,
            0..oos_from,
            oos_from..n_rows,
            cfg.evaluation.vi_moving_average,
        )?;
        Ok((a, g))
    });
    let (adjusted, adjusted_grouped, adjusted_error) = match adjusted {
        Ok((a, g)) => (Some(a), Some(g), None),
        Err(e) => (None, None, Some(e.to_string())),
    };

    let oos = shap.slice(oos_from..n_rows);
    let timeline = if !endogenous && groups.values().any(|m| m.len() > 1) {
        interpret::top_contributor_timeline(&oos, Some(&groups))?
    } else {
        interpret::top_contributor_timeline(&oos, None)?
    };
    interpret::write_timeline_csv(&timeline, &dir.path(files::TIMELINE))?;

    let report = ViReport {
        features: shap.names.clone(),
        vi,
        grouped,
        adjusted,
        adjusted_grouped,
        adjusted_error,
        oos_start: ws.panel.dates()[ws.split].clone(),
        oos_rows: n_rows - oos_from,
        windows: windows.len(),
        max_local_accuracy_gap: max_gap,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    dir.write(files::VI, json.as_bytes())?;
    dir.write_manifest()?;
    if !(max_gap <= LOCAL_ACCURACY_TOL) {
        return Err(CliError::Audit(format!(
            "local accuracy gap {max_gap:e} exceeds {LOCAL_ACCURACY_TOL:e}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_lag_suffix() {
        let names: Vec<String> = ["dp_l0", "dp_l1", "tbl_l0", "x_label", "y"].iter().map(|s| s.to_string()).collect();
        let g = feature_groups(&names, false);
        assert_eq!(g["dp"], vec!["dp_l0", "dp_l1"]);
        assert_eq!(g["tbl"], vec!["tbl_l0"]);
        assert_eq!(g["x_label"], vec!["x_label"]);
        assert_eq!(g["y"], vec!["y"]);
        let g = feature_groups(&names, true);
        assert_eq!(g.len(), 1);
        assert_eq!(g["portfolio"].len(), 5);
    }
}
