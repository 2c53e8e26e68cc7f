use std::path::Path;

use mmlp_core::data::write_table;
use mmlp_core::synth::bundled_dataset;
use nalgebra::DMatrix;

use crate::error::{CliError, Result};

pub const RETURNS: &str = "returns.csv";
pub const FEATURES: &str = "features.csv";
pub const CONFIG: &str = "demo.toml";
pub const CONFIG_EXOGENOUS: &str = "demo-exogenous.toml";

/// Small enough to fit, backtest and interpret in well under a minute.
const DEMO: &str = r#"preset = "daily-20"
seed = 7
output_dir = "run"

[data]
returns = "returns.csv"
benchmark_column = "market"

[schedule]
train_fraction = 0.7

[mace]
eta = 1.0
s_max = 15

[mace.mode]
kind = "endogenous-lags"
max_lag = 5
marx = true

[mace.forest]
n_trees = 60
min_node_size = 20
block_size = 20

[trading]
vol_lookback = 120
pm_lookback = 500

[baseline]
n_random = 20
"#;

const DEMO_EXOGENOUS: &str = r#"preset = "monthly"
seed = 7
output_dir = "run-exogenous"

[data]
returns = "returns.csv"
features = "features.csv"
benchmark_column = "market"
feature_lags = 2

[schedule]
train_fraction = 0.9
expanding = true
step = 40

[mace]
s_max = 10

[mace.forest]
n_trees = 40
min_node_size = 20
block_size = 20

[trading]
vol_lookback = 60
pm_lookback = 240

[baseline]
n_random = 10
"#;

/// Writes the bundled dataset (with an equal-weight `market` column) and
/// two demo configs into `out`.
pub fn run(out: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let (panel, features) = bundled_dataset(seed);
    let (t, n) = (panel.n_periods(), panel.n_assets());
    let mut columns = panel.assets().to_vec();
    columns.push("market".into());
    let values = DMatrix::from_fn(t, n + 1, |i, j| {
        if j < n {
            panel.values()[(i, j)]
        } else {
            panel.values().row(i).sum() / n as f64
        }
    });
    let p = out.join(RETURNS);
    write_table(&p, panel.dates(), &columns, &values).map_err(|e| CliError::io(&p, e))?;
    let p = out.join(FEATURES);
    write_table(&p, features.dates(), features.names(), features.values()).map_err(|e| CliError::io(&p, e))?;
    for (name, body) in [(CONFIG, DEMO), (CONFIG_EXOGENOUS, DEMO_EXOGENOUS)] {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(())
}
