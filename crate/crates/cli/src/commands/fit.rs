use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::workspace::{files, Fitted, RunDir, Workspace};

use super::progress;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    dir.snapshot(cfg)?;
    let rows = ws.train_rows(ws.split);
    progress(format!(
        "fitting on {rows} of {} rows ({} assets, bag size {})",
        ws.n_rows(),
        ws.panel.n_assets(),
        cfg.mace.bag_size
    ));
    let fitted = Fitted::fit(&ws, cfg, rows)?;
    for stale in [files::MODEL, files::BAG] {
        let p = dir.path(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    fitted.save(&dir)?;
    write_history(&dir, &fitted)?;
    for (b, m) in fitted.members().iter().enumerate() {
        progress(format!(
            "member {b}: {} iterations, kept s = {}",
            m.iterations(),
            m.best_s
        ));
    }
    dir.write_manifest()
}

fn write_history(dir: &RunDir, fitted: &Fitted) -> Result<()> {
    let path = dir.path(files::HISTORY);
    let wrap = |e: csv::Error| CliError::io(&path, e.into());
    let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
    w.write_record([
        "member",
        "s",
        "in_sample_loss",
        "oob_rmse",
        "delta_w",
        "lambda",
        "calibration",
        "filled_rows",
    ])
    .map_err(wrap)?;
    for (b, m) in fitted.members().iter().enumerate() {
        for h in &m.history {
            let calibration = serde_json::to_value(h.calibration)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            w.write_record([
                b.to_string(),
                h.s.to_string(),
                h.in_sample_loss.to_string(),
                h.oob_rmse.to_string(),
                h.delta_w.to_string(),
                h.lambda.to_string(),
                calibration,
                h.filled_rows.to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}
