use std::collections::BTreeMap;
use std::ops::Range;

use mmlp_core::data::portfolio_returns;
use mmlp_core::mace::{self, derive_seed, FeatureMode};
use mmlp_core::metrics::{self, BaselineFeatures, ForecastEval, MetricsBundle};
use mmlp_core::trading::{self, prevailing_mean, shift_forward, BacktestInput, BacktestResult, TradingConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::workspace::{files, Fitted, RunDir, Window, Workspace};

use super::{head, mean, progress};

/// One traded portfolio over every row: weights, its return, forecasts of
/// that return and the frozen training mean used in the R² benchmark.
#[derive(Debug, Clone)]
struct Leg {
    weights: DMatrix<f64>,
    portfolio: Vec<f64>,
    forecasts: Vec<Option<f64>>,
    pm: Vec<f64>,
}

impl Leg {
    fn new(t: usize, n: usize) -> Self {
        Self {
            weights: DMatrix::zeros(t, n),
            portfolio: vec![0.0; t],
            forecasts: vec![None; t],
            pm: vec![0.0; t],
        }
    }

    fn hold(&mut self, rows: Range<usize>, w: &[f64], returns: &DMatrix<f64>) {
        for t in rows {
            for (j, v) in w.iter().enumerate() {
                self.weights[(t, j)] = *v;
            }
            self.portfolio[t] = (0..w.len()).map(|j| w[j] * returns[(t, j)]).sum();
        }
    }

    /// Same portfolio traded on its own trailing mean.
    fn with_prevailing_mean(&self, lookback: usize) -> Self {
        Self {
            forecasts: shift_forward(&prevailing_mean(&self.portfolio, lookback)),
            ..self.clone()
        }
    }
}

struct Strategy {
    name: String,
    legs: Vec<Leg>,
    asset_returns: DMatrix<f64>,
    trading: TradingConfig,
    /// Whether the forecasts come from a fitted model and get an R².
    learned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub train_end: String,
    pub test_periods: usize,
    pub refits: usize,
    pub omega_threshold: f64,
    pub cost_multiple: f64,
    pub strategies: BTreeMap<String, MetricsBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcRow {
    pub strategy: String,
    pub cost_multiple: f64,
    pub r_annualized: f64,
    pub sharpe: Option<f64>,
    pub mean_turnover: f64,
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::load(cfg)?;
    let dir = RunDir::create(&cfg.output_dir)?;
    let artifact = Fitted::load(&dir)?;
    artifact.check_compatible(&ws, cfg)?;
    dir.snapshot(cfg)?;

    let windows = ws.windows(cfg);
    progress(format!("backtesting {} test rows over {} window(s)", ws.n_rows() - ws.split, windows.len()));
    let strategies = build_strategies(&ws, cfg, &artifact, &windows)?;

    let threshold = omega_threshold(&ws, cfg);
    let split = ws.split;
    let test_dates = &ws.panel.dates()[split..];
    let mut bundles = BTreeMap::new();
    let mut sweep = Vec::new();
    for s in &strategies {
        let result = simulate(s, &ws)?;
        result.write_csv(&dir.path(&files::backtest(&s.name)))?;
        let mut bundle = MetricsBundle::compute(&result.net, cfg.evaluation.periods_per_year, threshold, None)?;
        if s.learned {
            let evals = s
                .legs
                .iter()
                .map(|leg| forecast_fit(leg, split, test_dates, cfg))
                .collect::<Result<Vec<_>>>()?;
            let b = evals.len() as f64;
            bundle.r2_oos = Some(evals.iter().map(|(r2, _)| r2).sum::<f64>() / b);
            for name in evals[0].1.keys() {
                let v = evals.iter().map(|(_, m)| m[name]).sum::<f64>() / b;
                bundle.r2_by_slice.insert(name.clone(), v);
            }
        }
        for &c in &cfg.evaluation.cost_grid {
            let r = result.with_cost(c);
            sweep.push(TcRow {
                strategy: s.name.clone(),
                cost_multiple: c,
                r_annualized: metrics::annualized_return(&r.net, cfg.evaluation.periods_per_year)?,
                sharpe: metrics::sharpe(&r.net, cfg.evaluation.periods_per_year).ok(),
                mean_turnover: mean(&r.turnover),
            });
        }
        bundles.insert(s.name.clone(), bundle);
    }

    let file = MetricsFile {
        train_end: ws.panel.dates()[split - 1].clone(),
        test_periods: ws.n_rows() - split,
        refits: windows.len(),
        omega_threshold: threshold,
        cost_multiple: cfg.trading.cost_multiple,
        strategies: bundles,
    };
    let json = serde_json::to_string_pretty(&file).expect("metrics serialize");
    dir.write(files::METRICS, json.as_bytes())?;
    write_sweep(&dir, &sweep)?;
    dir.write_manifest()
}

/// Benchmark training mean (equal weight when no benchmark column is
/// configured) times the configured multiple.
fn omega_threshold(ws: &Workspace, cfg: &RunConfig) -> f64 {
    let train = ws.train_rows(ws.split);
    let base = match &ws.benchmark {
        Some(b) => mean(&b[..train]),
        None => {
            let n = ws.panel.n_assets();
            mean(&portfolio_returns(&head(ws.panel.values(), train), &vec![1.0 / n as f64; n]))
        }
    };
    base * cfg.evaluation.omega_threshold_multiple
}

fn forecast_fit(leg: &Leg, split: usize, dates: &[String], cfg: &RunConfig) -> Result<(f64, BTreeMap<String, f64>)> {
    let (mut d, mut y, mut yhat, mut pm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, t) in (split..leg.portfolio.len()).enumerate() {
        if let Some(f) = leg.forecasts[t] {
            d.push(dates[i].clone());
            y.push(leg.portfolio[t]);
            yhat.push(f);
            pm.push(leg.pm[t]);
        }
    }
    let eval = ForecastEval {
        dates: &d,
        y: &y,
        yhat: &yhat,
        pm: &pm,
        slices: &cfg.evaluation.slices,
    };
    Ok((
        metrics::oos_r2(eval.y, eval.yhat, eval.pm)?,
        metrics::slice_r2(eval.dates, eval.y, eval.yhat, eval.pm, eval.slices)?,
    ))
}

fn simulate(s: &Strategy, ws: &Workspace) -> Result<BacktestResult> {
    let members = s
        .legs
        .iter()
        .map(|leg| {
            trading::run_backtest(
                BacktestInput {
                    dates: ws.panel.dates(),
                    portfolio_returns: &leg.portfolio,
                    forecasts: &leg.forecasts,
                    weights: &leg.weights,
                    asset_returns: &s.asset_returns,
                    trade_from: ws.split,
                },
                &s.trading,
            )
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if members.len() == 1 {
        return Ok(members.into_iter().next().expect("one member"));
    }
    let rows = s.asset_returns.nrows() - ws.split;
    let test = s.asset_returns.rows(ws.split, rows).into_owned();
    Ok(trading::combine_members(&members, &test)?)
}

fn build_strategies(ws: &Workspace, cfg: &RunConfig, artifact: &Fitted, windows: &[Window]) -> Result<Vec<Strategy>> {
    let (t, n) = (ws.n_rows(), ws.panel.n_assets());
    let returns = ws.panel.values();
    let pm_trading = TradingConfig {
        vol_lookback: cfg.trading.pm_lookback,
        ..cfg.trading.clone()
    };

    let mut model_legs: Vec<Leg> = Vec::new();
    let mut ew = Leg::new(t, n);
    let mut mv = Leg::new(t, n);
    let bench_returns = ws.benchmark.as_ref().map(|b| DMatrix::from_column_slice(t, 1, b));
    let mut bench = Leg::new(t, 1);

    for (i, win) in windows.iter().enumerate() {
        let train = ws.train_rows(win.start);
        let held = if i == 0 { 0..win.end } else { win.start..win.end };
        let refit;
        let fitted = if i == 0 {
            artifact
        } else {
            progress(format!("refit {}/{} on {train} rows", i + 1, windows.len()));
            refit = Fitted::fit(ws, cfg, train)?;
            &refit
        };
        let r_end = head(returns, win.end);
        let x_end = ws.features.as_ref().map(|x| head(x.values(), win.end));
        for (b, m) in fitted.members().into_iter().enumerate() {
            if i == 0 {
                model_legs.push(Leg::new(t, n));
            }
            let leg = model_legs
                .get_mut(b)
                .ok_or_else(|| CliError::Artifact("bag size changed between windows".into()))?;
            let w = m.traded_weights();
            let scale = m.traded_scale();
            leg.hold(held.clone(), &w, returns);
            let fc = m.forecast(&r_end, x_end.as_ref())?;
            let train_mean = mean(&leg.portfolio[..train]);
            for row in win.start..win.end {
                leg.forecasts[row] = fc[row].map(|v| v * scale);
                leg.pm[row] = train_mean;
            }
        }

        let features = match (&x_end, cfg.mace.mode) {
            (Some(x), _) => BaselineFeatures::Exogenous(x),
            (None, FeatureMode::EndogenousLags { max_lag, marx }) => BaselineFeatures::Lags {
                max_lag,
                marx,
                horizon: ws.horizon,
            },
            (None, FeatureMode::Exogenous) => unreachable!("validated config"),
        };
        let forest = |tag: u64| mmlp_core::forest::ForestConfig {
            seed: derive_seed(cfg.seed, 3_000_000 + 4 * i as u64 + tag),
            ..cfg.mace.forest.clone()
        };

        let equal = vec![1.0 / n as f64; n];
        let (minvar, _) = mace::min_variance_weights(&mace::sample_covariance(&head(returns, train)), 0.1)?;
        let mut fixed: Vec<(&mut Leg, Vec<f64>, DMatrix<f64>, u64)> =
            vec![(&mut ew, equal, r_end.clone(), 0), (&mut mv, minvar, r_end.clone(), 1)];
        if let Some(br) = &bench_returns {
            fixed.push((&mut bench, vec![1.0], head(br, win.end), 2));
        }
        for (leg, w, assets, tag) in fixed {
            leg.hold(held.clone(), &w, &assets);
            let fc = metrics::fixed_portfolio_forecasts(&assets, &w, features, &forest(tag), train)?;
            let skip = win.start - train;
            for (k, row) in (win.start..win.end).enumerate() {
                leg.forecasts[row] = Some(fc.test[skip + k]);
                leg.pm[row] = fc.train_mean;
            }
        }
    }

    let lookback = cfg.trading.pm_lookback;
    let mut out = vec![
        Strategy {
            name: "mace".into(),
            legs: model_legs.clone(),
            asset_returns: returns.clone(),
            trading: cfg.trading.clone(),
            learned: true,
        },
        Strategy {
            name: "mace-pm".into(),
            legs: model_legs.iter().map(|l| l.with_prevailing_mean(lookback)).collect(),
            asset_returns: returns.clone(),
            trading: pm_trading.clone(),
            learned: false,
        },
    ];
    let mut add_fixed = |prefix: &str, leg: Leg, assets: DMatrix<f64>| {
        out.push(Strategy {
            name: format!("{prefix}-pm"),
            legs: vec![leg.with_prevailing_mean(lookback)],
            asset_returns: assets.clone(),
            trading: pm_trading.clone(),
            learned: false,
        });
        out.push(Strategy {
            name: format!("{prefix}-rf"),
            legs: vec![leg],
            asset_returns: assets,
            trading: cfg.trading.clone(),
            learned: true,
        });
    };
    add_fixed("ew", ew, returns.clone());
    add_fixed("minvar", mv, returns.clone());
    if let Some(br) = bench_returns {
        add_fixed("benchmark", bench, br);
    }
    Ok(out)
}

fn write_sweep(dir: &RunDir, rows: &[TcRow]) -> Result<()> {
    let path = dir.path(files::TC_SWEEP);
    let wrap = |e: csv::Error| CliError::io(&path, e.into());
    let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
    for r in rows {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}
