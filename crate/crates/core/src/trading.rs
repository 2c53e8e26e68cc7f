//! Mean-variance timing of a single synthetic security, with turnover
//! accounting on the underlying assets.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TradingError {
    #[error("invalid trading configuration: {0}")]
    Config(String),
    #[error("variance forecast must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("zero variance forecast for period {0}")]
    ZeroVariance(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TradingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradingConfig {
    /// Risk aversion.
    pub gamma: f64,
    pub position_bounds: (f64, f64),
    /// Trailing window for the variance of the traded portfolio.
    pub vol_lookback: usize,
    /// Trailing window for prevailing-mean forecasts; benchmark strategies
    /// also use it for their variance.
    pub pm_lookback: usize,
    /// Cost per unit of turnover, as a decimal.
    pub cost_multiple: f64,
}

impl Default for TradingConfig {
    fn default() -> Self {
        Self::daily()
    }
}

impl TradingConfig {
    pub fn daily() -> Self {
        Self {
            gamma: 5.0,
            position_bounds: (-1.0, 2.0),
            vol_lookback: 252,
            pm_lookback: 2520,
            cost_multiple: 0.0001,
        }
    }

    pub fn monthly() -> Self {
        Self {
            gamma: 3.0,
            position_bounds: (-1.0, 2.0),
            vol_lookback: 60,
            pm_lookback: 240,
            cost_multiple: 0.0005,
        }
    }

    /// Cost grid for the sensitivity table.
    pub fn daily_cost_grid() -> [f64; 3] {
        [0.0001, 0.00015, 0.0003]
    }

    pub fn monthly_cost_grid() -> [f64; 3] {
        [0.0005, 0.001, 0.01]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TradingError::Config(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        let (lo, hi) = self.position_bounds;
        if !(lo < hi) {
            return bad("position lower bound must be below the upper bound");
        }
        if self.vol_lookback < 2 || self.pm_lookback < 2 {
            return bad("lookbacks must be at least 2");
        }
        if !(self.cost_multiple >= 0.0) {
            return bad("cost multiple must be non-negative");
        }
        Ok(())
    }
}

/// `y_hat / (gamma sigma2)` before clamping.
pub fn raw_position(y_hat: f64, sigma2_hat: f64, gamma: f64) -> Result<f64> {
    if !(sigma2_hat > 0.0) {
        return Err(TradingError::NonPositiveVariance(sigma2_hat));
    }
    Ok(y_hat / (gamma * sigma2_hat))
}

pub fn mv_position(y_hat: f64, sigma2_hat: f64, config: &TradingConfig) -> Result<f64> {
    let (lo, hi) = config.position_bounds;
    Ok(raw_position(y_hat, sigma2_hat, config.gamma)?.clamp(lo, hi))
}

/// Entry `t` is the sample variance (divisor n-1) of the trailing
/// `min(t + 1, lookback)` observations ending at `t`: the forecast for
/// period `t + 1`. Needs two observations.
pub fn rolling_variance(series: &[f64], lookback: usize) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(lookback);
            let w = &series[start..=t];
            if w.len() < 2 {
                return None;
            }
            let n = w.len() as f64;
            let m = w.iter().sum::<f64>() / n;
            Some(w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
        })
        .collect()
}

/// Entry `t` is the mean of the trailing `min(t + 1, lookback)`
/// observations ending at `t`.
pub fn prevailing_mean(series: &[f64], lookback: usize) -> Vec<Option<f64>> {
    let lookback = lookback.max(1);
    (0..series.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(lookback);
            let w = &series[start..=t];
            Some(w.iter().sum::<f64>() / w.len() as f64)
        })
        .collect()
}

/// Shifts a series of estimates made at `t` onto the period they forecast.
pub fn shift_forward(estimates: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = vec![None; estimates.len()];
    for t in 1..estimates.len() {
        out[t] = estimates[t - 1];
    }
    out
}

/// Inputs of a simulation over `T` periods. Trading starts at `trade_from`;
/// earlier rows only feed the variance estimate.
#[derive(Debug, Clone, Copy)]
pub struct BacktestInput<'a> {
    pub dates: &'a [String],
    /// Realized return of the relative portfolio in each period.
    pub portfolio_returns: &'a [f64],
    /// Forecast of `portfolio_returns[t]` made with data up to `t - 1`.
    pub forecasts: &'a [Option<f64>],
    /// Relative asset weights held in each period (T x N).
    pub weights: &'a DMatrix<f64>,
    pub asset_returns: &'a DMatrix<f64>,
    pub trade_from: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub dates: Vec<String>,
    pub positions: Vec<f64>,
    /// Positions before clamping.
    pub raw_positions: Vec<f64>,
    pub gross: Vec<f64>,
    pub net: Vec<f64>,
    pub turnover: Vec<f64>,
    pub costs: Vec<f64>,
    /// Effective per-asset exposures `omega_t w_t` (periods x N).
    pub effective_weights: DMatrix<f64>,
    pub forecasts: Vec<Option<f64>>,
    /// Whether a position could be formed (forecast and variance available).
    pub active: Vec<bool>,
    pub clamped: usize,
    /// Periods whose prior portfolio lost everything before rebalancing.
    pub wiped_out: Vec<usize>,
    pub cost_multiple: f64,
}

/// Sum over assets of `|target - drifted prior|` where the prior exposures
/// drift with the returns earned while they were held.
pub fn turnover_step(prior: &[f64], prior_returns: &[f64], target: &[f64]) -> (f64, bool) {
    let growth = 1.0 + prior.iter().zip(prior_returns).map(|(w, r)| w * r).sum::<f64>();
    if growth <= 0.0 {
        return (target.iter().map(|v| v.abs()).sum(), true);
    }
    let t = target
        .iter()
        .zip(prior.iter().zip(prior_returns))
        .map(|(x, (w, r))| (x - w * (1.0 + r) / growth).abs())
        .sum();
    (t, false)
}

pub fn run_backtest(input: BacktestInput<'_>, config: &TradingConfig) -> Result<BacktestResult> {
    config.validate()?;
    let t_all = input.portfolio_returns.len();
    let n = input.weights.ncols();
    let check = |what: &str, len: usize| {
        if len != t_all {
            Err(TradingError::LengthMismatch(format!("{what} has {len} rows, expected {t_all}")))
        } else {
            Ok(())
        }
    };
    check("forecasts", input.forecasts.len())?;
    check("dates", input.dates.len())?;
    check("weights", input.weights.nrows())?;
    check("asset returns", input.asset_returns.nrows())?;
    if input.asset_returns.ncols() != n {
        return Err(TradingError::LengthMismatch("weights and asset returns disagree on N".into()));
    }
    if input.trade_from >= t_all {
        return Err(TradingError::LengthMismatch("trade_from beyond the sample".into()));
    }

    let variance = rolling_variance(input.portfolio_returns, config.vol_lookback);
    let periods = t_all - input.trade_from;
    let (lo, hi) = config.position_bounds;
    let mut out = BacktestResult {
        dates: input.dates[input.trade_from..].to_vec(),
        positions: Vec::with_capacity(periods),
        raw_positions: Vec::with_capacity(periods),
        gross: Vec::with_capacity(periods),
        net: Vec::with_capacity(periods),
        turnover: Vec::with_capacity(periods),
        costs: Vec::with_capacity(periods),
        effective_weights: DMatrix::zeros(periods, n),
        forecasts: input.forecasts[input.trade_from..].to_vec(),
        active: Vec::with_capacity(periods),
        clamped: 0,
        wiped_out: Vec::new(),
        cost_multiple: config.cost_multiple,
    };
    let mut prior = vec![0.0; n];
    let mut prior_returns = vec![0.0; n];
    for (i, t) in (input.trade_from..t_all).enumerate() {
        let sigma2 = if t == 0 { None } else { variance[t - 1] };
        let (raw, omega, active) = match (input.forecasts[t], sigma2) {
            (Some(y), Some(s2)) => {
                if !(s2 > 0.0) {
                    return Err(TradingError::ZeroVariance(t));
                }
                let raw = raw_position(y, s2, config.gamma)?;
                (raw, raw.clamp(lo, hi), true)
            }
            _ => (0.0, 0.0, false),
        };
        if raw != omega {
            out.clamped += 1;
        }
        let target: Vec<f64> = (0..n).map(|j| omega * input.weights[(t, j)]).collect();
        let (turnover, wiped) = turnover_step(&prior, &prior_returns, &target);
        if wiped {
            out.wiped_out.push(i);
        }
        let gross = omega * input.portfolio_returns[t];
        let cost = config.cost_multiple * turnover;
        for (j, v) in target.iter().enumerate() {
            out.effective_weights[(i, j)] = *v;
        }
        out.positions.push(omega);
        out.raw_positions.push(raw);
        out.gross.push(gross);
        out.net.push(gross - cost);
        out.turnover.push(turnover);
        out.costs.push(cost);
        out.active.push(active);
        prior = target;
        prior_returns = (0..n).map(|j| input.asset_returns[(t, j)]).collect();
    }
    Ok(out)
}

/// Equal-weight combination of member simulations over the same periods.
/// Effective weights average; turnover and costs are recomputed on the
/// averaged weights, so offsetting member trades net out. `asset_returns`
/// holds one row per traded period.
pub fn combine_members(members: &[BacktestResult], asset_returns: &DMatrix<f64>) -> Result<BacktestResult> {
    let first = members
        .first()
        .ok_or_else(|| TradingError::LengthMismatch("no members to combine".into()))?;
    let (periods, n) = first.effective_weights.shape();
    for m in members {
        if m.effective_weights.shape() != (periods, n) || m.dates != first.dates {
            return Err(TradingError::LengthMismatch("members cover different periods or assets".into()));
        }
        if m.cost_multiple != first.cost_multiple {
            return Err(TradingError::Config("members use different cost multiples".into()));
        }
    }
    if asset_returns.shape() != (periods, n) {
        return Err(TradingError::LengthMismatch(format!(
            "asset returns are {:?}, expected {:?}",
            asset_returns.shape(),
            (periods, n)
        )));
    }
    let b = members.len() as f64;
    let avg = |f: &dyn Fn(&BacktestResult) -> &Vec<f64>| -> Vec<f64> {
        (0..periods).map(|i| members.iter().map(|m| f(m)[i]).sum::<f64>() / b).collect()
    };
    let mut effective = DMatrix::zeros(periods, n);
    for m in members {
        effective += &m.effective_weights;
    }
    effective /= b;
    let gross = avg(&|m| &m.gross);
    let mut out = BacktestResult {
        dates: first.dates.clone(),
        positions: avg(&|m| &m.positions),
        raw_positions: avg(&|m| &m.raw_positions),
        gross,
        net: Vec::with_capacity(periods),
        turnover: Vec::with_capacity(periods),
        costs: Vec::with_capacity(periods),
        effective_weights: effective,
        forecasts: (0..periods)
            .map(|i| {
                members
                    .iter()
                    .map(|m| m.forecasts[i])
                    .sum::<Option<f64>>()
                    .map(|v| v / b)
            })
            .collect(),
        active: (0..periods).map(|i| members.iter().any(|m| m.active[i])).collect(),
        clamped: members.iter().map(|m| m.clamped).sum(),
        wiped_out: Vec::new(),
        cost_multiple: first.cost_multiple,
    };
    let mut prior = vec![0.0; n];
    let mut prior_returns = vec![0.0; n];
    for i in 0..periods {
        let target: Vec<f64> = out.effective_weights.row(i).iter().copied().collect();
        let (turnover, wiped) = turnover_step(&prior, &prior_returns, &target);
        if wiped {
            out.wiped_out.push(i);
        }
        let cost = out.cost_multiple * turnover;
        out.turnover.push(turnover);
        out.costs.push(cost);
        out.net.push(out.gross[i] - cost);
        prior = target;
        prior_returns = asset_returns.row(i).iter().copied().collect();
    }
    Ok(out)
}

impl BacktestResult {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same positions, different cost multiple.
    pub fn with_cost(&self, cost_multiple: f64) -> Self {
        let mut out = self.clone();
        out.cost_multiple = cost_multiple;
        out.costs = self.turnover.iter().map(|t| cost_multiple * t).collect();
        out.net = self.gross.iter().zip(&out.costs).map(|(g, c)| g - c).collect();
        out
    }

    /// One row per period: date, position, gross, net, turnover.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "omega", "gross", "net", "turnover"])?;
        for i in 0..self.len() {
            w.write_record([
                self.dates[i].clone(),
                self.positions[i].to_string(),
                self.gross[i].to_string(),
                self.net[i].to_string(),
                self.turnover[i].to_string(),
            ])?;
        }
        w.flush().map_err(|source| TradingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TradingConfig {
        TradingConfig {
            vol_lookback: 20,
            ..TradingConfig::daily()
        }
    }

    #[test]
    fn position_rule() {
        let c = TradingConfig::daily();
        assert_eq!(mv_position(0.0, 0.01, &c).unwrap(), 0.0);
        assert!((mv_position(0.05, 0.01, &c).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mv_position(0.5, 0.01, &c).unwrap(), 2.0);
        assert_eq!(mv_position(-0.5, 0.01, &c).unwrap(), -1.0);
        assert!(mv_position(0.1, 0.0, &c).is_err());
    }

    #[test]
    fn rolling_variance_cases() {
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let v = rolling_variance(&alt, 4);
        assert_eq!(v[0], None);
        assert!((v[9].unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let c = rolling_variance(&[3.0; 5], 3);
        assert_eq!(c[4], Some(0.0));
    }

    #[test]
    fn rolling_estimates_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let base_v = rolling_variance(&s, 10);
        let base_m = prevailing_mean(&s, 10);
        let mut poisoned = s.clone();
        poisoned[30] = 1e9;
        assert_eq!(rolling_variance(&poisoned, 10)[..30], base_v[..30]);
        assert_eq!(prevailing_mean(&poisoned, 10)[..30], base_m[..30]);
    }

    #[test]
    fn prevailing_mean_cases() {
        assert!(prevailing_mean(&[2.5; 6], 3).iter().all(|m| *m == Some(2.5)));
        assert_eq!(prevailing_mean(&[0.0, 2.0], 5)[1], Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let pm = prevailing_mean(&s, 100);
        let mut acc = 0.0;
        for (t, v) in s.iter().enumerate() {
            acc += v;
            assert!((pm[t].unwrap() - acc / (t + 1) as f64).abs() < 1e-12);
        }
    }

    fn random_inputs(t: usize, n: usize, seed: u64) -> (Vec<String>, Vec<f64>, Vec<Option<f64>>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = DMatrix::from_fn(t, n, |_, _| rng.random_range(-0.05..0.05));
        let w = DMatrix::from_fn(t, n, |_, _| rng.random_range(0.0..1.0));
        let p: Vec<f64> = (0..t).map(|i| (0..n).map(|j| w[(i, j)] * r[(i, j)]).sum()).collect();
        let f: Vec<Option<f64>> = (0..t).map(|_| Some(rng.random_range(-0.01..0.01))).collect();
        let d = (0..t).map(|i| format!("{i:03}")).collect();
        (d, p, f, w, r)
    }

    #[test]
    fn flat_strategy_is_flat() {
        let (d, p, _, w, r) = random_inputs(30, 3, 3);
        let zero = vec![Some(0.0); 30];
        let res = run_backtest(
            BacktestInput {
                dates: &d,
                portfolio_returns: &p,
                forecasts: &zero,
                weights: &w,
                asset_returns: &r,
                trade_from: 0,
            },
            &cfg(),
        )
        .unwrap();
        assert!(res.gross.iter().chain(&res.net).chain(&res.turnover).all(|v| *v == 0.0));
    }

    #[test]
    fn zero_returns_turnover_is_plain_difference() {
        let (t, tw) = turnover_step(&[0.5, 0.5], &[0.0, 0.0], &[0.2, 0.9]);
        assert!(!tw);
        assert!((t - 0.7).abs() < 1e-15);
    }

    /// Independent drift-and-rebalance: value each holding, let it grow,
    /// renormalize by the new wealth, then compare with the target.
    fn turnover_oracle(eff: &DMatrix<f64>, r: &DMatrix<f64>, from: usize) -> Vec<f64> {
        let (periods, n) = eff.shape();
        let mut out = Vec::new();
        for i in 0..periods {
            let mut dollars = vec![0.0; n];
            let mut wealth = 1.0;
            if i > 0 {
                for j in 0..n {
                    dollars[j] = eff[(i - 1, j)] * (1.0 + r[(from + i - 1, j)]);
                    wealth += eff[(i - 1, j)] * r[(from + i - 1, j)];
                }
            }
            out.push((0..n).map(|j| (eff[(i, j)] - dollars[j] / wealth).abs()).sum());
        }
        out
    }

    #[test]
    fn turnover_matches_drift_oracle() {
        for seed in 0..20 {
            let (d, p, f, w, r) = random_inputs(12, 3, 10 + seed);
            let res = run_backtest(
                BacktestInput {
                    dates: &d,
                    portfolio_returns: &p,
                    forecasts: &f,
                    weights: &w,
                    asset_returns: &r,
                    trade_from: 7,
                },
                &cfg(),
            )
            .unwrap();
            assert_eq!(res.len(), 5);
            let oracle = turnover_oracle(&res.effective_weights, &r, 7);
            for (a, b) in res.turnover.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} {b}");
            }
        }
    }

    #[test]
    fn wiped_out_guard() {
        let (t, wiped) = turnover_step(&[2.0], &[-0.6], &[0.5]);
        assert!(wiped);
        assert_eq!(t, 0.5);
    }

    #[test]
    fn zero_cost_and_bounds() {
        let (d, p, f, w, r) = random_inputs(60, 4, 5);
        let c = TradingConfig {
            cost_multiple: 0.0,
            ..cfg()
        };
        let input = BacktestInput {
            dates: &d,
            portfolio_returns: &p,
            forecasts: &f,
            weights: &w,
            asset_returns: &r,
            trade_from: 0,
        };
        let res = run_backtest(input, &c).unwrap();
        assert_eq!(res.net, res.gross);
        assert!(!res.active[0] && !res.active[1] && res.active[2]);
        assert!(res.positions.iter().all(|&o| (-1.0..=2.0).contains(&o)));
        let n_clamped = res.raw_positions.iter().filter(|r| !(-1.0..=2.0).contains(*r)).count();
        assert_eq!(res.clamped, n_clamped);
        let costly = res.with_cost(0.01);
        for i in 0..res.len() {
            assert!((costly.net[i] - (res.gross[i] - 0.01 * res.turnover[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_portfolio_errors() {
        let d: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let p = vec![0.01; 5];
        let f = vec![Some(0.01); 5];
        let w = DMatrix::from_element(5, 1, 1.0);
        let r = DMatrix::from_element(5, 1, 0.01);
        let res = run_backtest(
            BacktestInput {
                dates: &d,
                portfolio_returns: &p,
                forecasts: &f,
                weights: &w,
                asset_returns: &r,
                trade_from: 0,
            },
            &cfg(),
        );
        assert!(matches!(res, Err(TradingError::ZeroVariance(2))));
    }

    #[test]
    fn csv_output() {
        let (d, p, f, w, r) = random_inputs(10, 2, 6);
        let res = run_backtest(
            BacktestInput {
                dates: &d,
                portfolio_returns: &p,
                forecasts: &f,
                weights: &w,
                asset_returns: &r,
                trade_from: 3,
            },
            &cfg(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bt.csv");
        res.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("date,omega,gross,net,turnover\n"));
        assert_eq!(text.lines().count(), 8);
    }

    #[test]
    fn combined_members_average_exposures() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, n) = (80, 3);
        let r = DMatrix::from_fn(t, n, |_, _| 0.01 * (rng.random::<f64>() - 0.5));
        let dates: Vec<String> = (0..t).map(|i| format!("{i:04}")).collect();
        let mut members = Vec::new();
        let mut weights = Vec::new();
        for b in 0..3 {
            let w: Vec<f64> = (0..n).map(|j| 0.2 + 0.3 * ((b + j) % 3) as f64).collect();
            let wm = DMatrix::from_fn(t, n, |_, j| w[j]);
            let z = crate::data::portfolio_returns(&r, &w);
            let f: Vec<Option<f64>> = (0..t).map(|i| Some(0.001 * ((i + b) % 5) as f64 - 0.002)).collect();
            let input = BacktestInput {
                dates: &dates,
                portfolio_returns: &z,
                forecasts: &f,
                weights: &wm,
                asset_returns: &r,
                trade_from: 30,
            };
            members.push(run_backtest(input, &cfg()).unwrap());
            weights.push(w);
        }
        let test_rows = r.rows(30, t - 30).into_owned();
        let bag = combine_members(&members, &test_rows).unwrap();
        for i in 0..bag.len() {
            let direct: f64 = (0..n).map(|j| bag.effective_weights[(i, j)] * test_rows[(i, j)]).sum();
            assert!((direct - bag.gross[i]).abs() <= 1e-15 + 1e-12 * direct.abs());
        }
        let single = combine_members(&members[..1], &test_rows).unwrap();
        assert_eq!(single.net, members[0].net);
        assert_eq!(single.turnover, members[0].turnover);
        assert!(combine_members(&members, &r).is_err());
    }

    proptest! {
        #[test]
        fn positions_scale_linearly(scale in 0.1f64..10.0, seed in 0u64..1000) {
            let (d, p, f, w, r) = random_inputs(25, 2, seed);
            let scaled: Vec<Option<f64>> = f.iter().map(|v| v.map(|x| x * scale)).collect();
            let run = |fc: &[Option<f64>]| run_backtest(BacktestInput {
                dates: &d, portfolio_returns: &p, forecasts: fc, weights: &w, asset_returns: &r, trade_from: 0,
            }, &cfg()).unwrap();
            let a = run(&f);
            let b = run(&scaled);
            for (x, y) in a.raw_positions.iter().zip(&b.raw_positions) {
                prop_assert!((x * scale - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
