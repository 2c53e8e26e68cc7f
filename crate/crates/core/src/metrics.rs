//! Forecast and strategy evaluation: out-of-sample R², return ratios,
//! drawdowns, slicing, the AR(1) diagnostic and random-portfolio baselines.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError};
use crate::forest::{fit_forest, ForestConfig, ForestError};
use crate::mace::derive_seed;
use crate::ridge::{normalize_variance, RidgeError};
use crate::stats::{self, StatsError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} observations, got {found}")]
    TooShort { needed: usize, found: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("prevailing-mean forecast has zero error")]
    ZeroBenchmarkError,
    #[error("return {value} at index {index} is not above -1")]
    ReturnBelowMinusOne { index: usize, value: f64 },
    #[error("slice {0:?} selects no periods")]
    EmptySlice(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("omega undefined: no deviations from the threshold")]
    OmegaUndefined,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Ridge(#[from] RidgeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(MetricsError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// `1 - MSE(model) / MSE(prevailing mean)`.
pub fn oos_r2(y: &[f64], yhat: &[f64], pm: &[f64]) -> Result<f64> {
    same_len(y.len(), yhat.len(), "forecasts")?;
    same_len(y.len(), pm.len(), "benchmark")?;
    if y.is_empty() {
        return Err(MetricsError::TooShort { needed: 1, found: 0 });
    }
    let denom = mse(y, pm);
    if denom == 0.0 {
        return Err(MetricsError::ZeroBenchmarkError);
    }
    Ok(1.0 - mse(y, yhat) / denom)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

pub fn annualized_return(returns: &[f64], periods_per_year: u32) -> Result<f64> {
    if returns.len() < 2 {
        return Err(MetricsError::TooShort {
            needed: 2,
            found: returns.len(),
        });
    }
    Ok(mean(returns) * periods_per_year as f64)
}

/// Annualized mean over standard deviation (divisor n-1).
pub fn sharpe(returns: &[f64], periods_per_year: u32) -> Result<f64> {
    let ra = annualized_return(returns, periods_per_year)?;
    let sd = sample_sd(returns);
    if !(sd > 0.0) || sd < 1e-300 {
        return Err(MetricsError::ZeroVariance);
    }
    let constant = returns.iter().all(|r| *r == returns[0]);
    if constant {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(ra / periods_per_year as f64 / sd * (periods_per_year as f64).sqrt())
}

/// Upper over lower partial first moments around `threshold`. Returns
/// `f64::INFINITY` when nothing falls below the threshold.
pub fn omega(returns: &[f64], threshold: f64) -> Result<f64> {
    let gains: f64 = returns.iter().map(|r| (r - threshold).max(0.0)).sum();
    let losses: f64 = returns.iter().map(|r| (threshold - r).max(0.0)).sum();
    match (gains > 0.0, losses > 0.0) {
        (_, true) => Ok(gains / losses),
        (true, false) => Ok(f64::INFINITY),
        (false, false) => Err(MetricsError::OmegaUndefined),
    }
}

/// Largest fall of log wealth from a running peak, with wealth starting at
/// zero log value.
pub fn max_drawdown(returns: &[f64]) -> Result<f64> {
    let mut level = 0.0f64;
    let mut peak = 0.0f64;
    let mut dd = 0.0f64;
    for (index, &r) in returns.iter().enumerate() {
        if !(r > -1.0) {
            return Err(MetricsError::ReturnBelowMinusOne { index, value: r });
        }
        level += r.ln_1p();
        peak = peak.max(level);
        dd = dd.max(peak - level);
    }
    Ok(dd)
}

/// Sample skewness `m3 / m2^1.5` and kurtosis `m4 / m2^2` (not excess).
pub fn skew_kurtosis(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let n = x.len() as f64;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2))
}

/// Named subset of the test window: the union of inclusive date ranges,
/// or its complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub name: String,
    pub ranges: Vec<(String, String)>,
    #[serde(default)]
    pub complement: bool,
}

impl SliceSpec {
    pub fn resolve(&self, dates: &[String]) -> Result<Vec<usize>> {
        let inside = |d: &String| self.ranges.iter().any(|(a, b)| d >= a && d <= b);
        let idx: Vec<usize> = dates
            .iter()
            .enumerate()
            .filter(|(_, d)| inside(d) != self.complement)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return Err(MetricsError::EmptySlice(self.name.clone()));
        }
        Ok(idx)
    }
}

pub fn slice_r2(
    dates: &[String],
    y: &[f64],
    yhat: &[f64],
    pm: &[f64],
    slices: &[SliceSpec],
) -> Result<BTreeMap<String, f64>> {
    same_len(dates.len(), y.len(), "dates")?;
    slices
        .iter()
        .map(|s| {
            let idx = s.resolve(dates)?;
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            Ok((s.name.clone(), oos_r2(&pick(y), &pick(yhat), &pick(pm))?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Diagnostic {
    pub intercept: f64,
    pub coefficient: f64,
    pub hac_std_error: f64,
    pub lags: usize,
}

/// OLS of `x_t` on `x_{t-1}` with Newey-West standard errors.
pub fn ar1_hac(series: &[f64]) -> Result<Ar1Diagnostic> {
    if series.len() < 10 {
        return Err(MetricsError::TooShort {
            needed: 10,
            found: series.len(),
        });
    }
    let y = &series[1..];
    let x = DMatrix::from_column_slice(y.len(), 1, &series[..series.len() - 1]);
    let fit = stats::with_hac(stats::ols(y, &x, true)?, &x, None)?;
    let se = fit.hac_std_errors.as_ref().expect("hac requested")[1];
    Ok(Ar1Diagnostic {
        intercept: fit.coefficients[0],
        coefficient: fit.coefficients[1],
        hac_std_error: se,
        lags: fit.hac_lags.unwrap_or(0),
    })
}

/// Correlation between forecasts and the previous period's realization.
pub fn pred_corr(yhat: &[f64], y_lag1: &[f64]) -> Result<f64> {
    Ok(stats::pearson(yhat, y_lag1)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub r2_oos: Option<f64>,
    pub r2_by_slice: BTreeMap<String, f64>,
    pub r_annualized: f64,
    pub sharpe: Option<f64>,
    /// `None` with `omega_infinite` set when no return fell below the
    /// threshold.
    pub omega: Option<f64>,
    pub omega_infinite: bool,
    pub omega_threshold: f64,
    pub max_drawdown: f64,
    pub kurtosis: f64,
    pub skewness: f64,
    pub periods_per_year: u32,
    pub n_periods: usize,
}

/// Realized and forecast series for the R² entries of a bundle.
#[derive(Debug, Clone, Copy)]
pub struct ForecastEval<'a> {
    pub dates: &'a [String],
    pub y: &'a [f64],
    pub yhat: &'a [f64],
    pub pm: &'a [f64],
    pub slices: &'a [SliceSpec],
}

impl MetricsBundle {
    pub fn compute(
        returns: &[f64],
        periods_per_year: u32,
        omega_threshold: f64,
        forecasts: Option<ForecastEval<'_>>,
    ) -> Result<Self> {
        let r_annualized = annualized_return(returns, periods_per_year)?;
        let sharpe = match sharpe(returns, periods_per_year) {
            Ok(v) => Some(v),
            Err(MetricsError::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        let (omega, omega_infinite) = match omega(returns, omega_threshold) {
            Ok(v) if v.is_infinite() => (None, true),
            Ok(v) => (Some(v), false),
            Err(_) => (None, false),
        };
        let (skewness, kurtosis) = skew_kurtosis(returns);
        let (r2_oos, r2_by_slice) = match forecasts {
            Some(f) => (
                Some(oos_r2(f.y, f.yhat, f.pm)?),
                slice_r2(f.dates, f.y, f.yhat, f.pm, f.slices)?,
            ),
            None => (None, BTreeMap::new()),
        };
        Ok(Self {
            r2_oos,
            r2_by_slice,
            r_annualized,
            sharpe,
            omega,
            omega_infinite,
            omega_threshold,
            max_drawdown: max_drawdown(returns)?,
            kurtosis: if kurtosis.is_finite() { kurtosis } else { 0.0 },
            skewness: if skewness.is_finite() { skewness } else { 0.0 },
            periods_per_year,
            n_periods: returns.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Predictors for the fixed-portfolio experiments.
#[derive(Debug, Clone, Copy)]
pub enum BaselineFeatures<'a> {
    /// Rows paired with return rows.
    Exogenous(&'a DMatrix<f64>),
    /// Lags of the portfolio itself.
    Lags { max_lag: usize, marx: bool, horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPortfolioFit {
    /// Out-of-bag R² on the training rows.
    pub in_sample_r2: f64,
    pub oos_r2: f64,
}

/// Forest forecasts of a fixed portfolio.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPortfolioForecast {
    /// Forecasts for rows `split..T`.
    pub test: Vec<f64>,
    /// Out-of-bag R² on the training rows.
    pub in_sample_r2: f64,
    pub train_mean: f64,
}

/// Fits the forest to the portfolio `returns * w` on rows before `split`
/// and predicts the remaining rows.
pub fn fixed_portfolio_forecasts(
    returns: &DMatrix<f64>,
    w: &[f64],
    features: BaselineFeatures<'_>,
    forest: &ForestConfig,
    split: usize,
) -> Result<FixedPortfolioForecast> {
    let z = data::portfolio_returns(returns, w);
    let (x, offset) = match features {
        BaselineFeatures::Exogenous(x) => {
            same_len(x.nrows(), z.len(), "features")?;
            (x.clone(), 0)
        }
        BaselineFeatures::Lags { max_lag, marx, horizon } => {
            let lags = data::lag_matrix(&z, max_lag, horizon)?;
            (if marx { data::marx(&lags) } else { lags }, horizon + max_lag - 1)
        }
    };
    if split <= offset + 1 || split >= z.len() {
        return Err(MetricsError::TooShort {
            needed: offset + 2,
            found: split,
        });
    }
    let n_train = split - offset;
    let x_train = x.rows(0, n_train).into_owned();
    let z_train = &z[offset..split];
    let f = fit_forest(&x_train, z_train, forest)?;
    let m = mean(z_train);
    let (mut sse, mut sst) = (0.0, 0.0);
    for (p, y) in f.predict_oob().prediction.iter().zip(z_train) {
        if let Some(p) = p {
            sse += (p - y).powi(2);
            sst += (y - m).powi(2);
        }
    }
    let x_test = x.rows(n_train, x.nrows() - n_train).into_owned();
    Ok(FixedPortfolioForecast {
        test: f.predict(&x_test)?,
        in_sample_r2: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        train_mean: m,
    })
}

/// In-sample and test R² of the forest on a fixed portfolio, the test
/// benchmark being the training mean.
pub fn evaluate_fixed_portfolio(
    returns: &DMatrix<f64>,
    w: &[f64],
    features: BaselineFeatures<'_>,
    forest: &ForestConfig,
    split: usize,
) -> Result<FixedPortfolioFit> {
    let fc = fixed_portfolio_forecasts(returns, w, features, forest, split)?;
    let z = data::portfolio_returns(returns, w);
    let y_test = &z[split..];
    let pm = vec![fc.train_mean; y_test.len()];
    Ok(FixedPortfolioFit {
        in_sample_r2: fc.in_sample_r2,
        oos_r2: oos_r2(y_test, &fc.test, &pm)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "asset")]
pub enum DrawKind {
    Random,
    SingleStock(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDraw {
    pub id: usize,
    pub kind: DrawKind,
    pub nonneg: bool,
    pub weights: Vec<f64>,
    pub fit: FixedPortfolioFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDistribution {
    pub draws: Vec<BaselineDraw>,
    /// Random draw with the highest in-sample R².
    pub top_in_sample: Option<usize>,
}

/// Dirichlet(1, ..., 1) draw via normalized unit exponentials.
pub fn dirichlet_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone)]
pub struct BaselineSpec<'a> {
    pub features: BaselineFeatures<'a>,
    pub n_random: usize,
    pub nonneg: bool,
    pub forest: ForestConfig,
    pub split: usize,
    pub seed: u64,
}

/// Random fixed portfolios plus every single asset, each predicted by the
/// forest. Draw `i` uses its own seed so results do not depend on
/// scheduling.
pub fn random_baseline(returns: &DMatrix<f64>, spec: &BaselineSpec<'_>) -> Result<BaselineDistribution> {
    let n = returns.ncols();
    let train = returns.rows(0, spec.split.min(returns.nrows())).into_owned();
    let mut jobs: Vec<(usize, DrawKind, Vec<f64>)> = Vec::with_capacity(spec.n_random + n);
    for i in 0..spec.n_random {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
        let w = if spec.nonneg {
            dirichlet_weights(n, &mut rng)
        } else {
            let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            normalize_variance(&raw, &train)?.w
        };
        jobs.push((i, DrawKind::Random, w));
    }
    for j in 0..n {
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        jobs.push((spec.n_random + j, DrawKind::SingleStock(j), w));
    }
    let draws = jobs
        .into_par_iter()
        .map(|(id, kind, weights)| {
            let forest = ForestConfig {
                seed: derive_seed(spec.forest.seed ^ spec.seed, 10_000 + id as u64),
                ..spec.forest.clone()
            };
            let fit = evaluate_fixed_portfolio(returns, &weights, spec.features, &forest, spec.split)?;
            Ok(BaselineDraw {
                id,
                kind,
                nonneg: spec.nonneg,
                weights,
                fit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let top_in_sample = draws
        .iter()
        .filter(|d| d.kind == DrawKind::Random)
        .max_by(|a, b| a.fit.in_sample_r2.total_cmp(&b.fit.in_sample_r2))
        .map(|d| d.id);
    Ok(BaselineDistribution { draws, top_in_sample })
}

impl BaselineDistribution {
    pub fn random_oos(&self) -> Vec<f64> {
        self.draws
            .iter()
            .filter(|d| d.kind == DrawKind::Random)
            .map(|d| d.fit.oos_r2)
            .collect()
    }

    /// Share of random draws whose OOS R² is below `value`.
    pub fn percentile_of(&self, value: f64) -> f64 {
        let r = self.random_oos();
        if r.is_empty() {
            return f64::NAN;
        }
        r.iter().filter(|v| **v < value).count() as f64 / r.len() as f64
    }

    /// Draw id, kind, nonneg flag, in-sample R², OOS R².
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["draw_id", "kind", "nonneg", "in_sample_r2", "oos_r2"])?;
        for d in &self.draws {
            let kind = match d.kind {
                DrawKind::Random => "random".to_owned(),
                DrawKind::SingleStock(j) => format!("stock_{j}"),
            };
            w.write_record([
                d.id.to_string(),
                kind,
                d.nonneg.to_string(),
                d.fit.in_sample_r2.to_string(),
                d.fit.oos_r2.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.05..0.05)).collect()
    }

    #[test]
    fn oos_r2_cases() {
        let y = rand_vec(50, 1);
        let pm = vec![0.001; 50];
        assert_eq!(oos_r2(&y, &pm, &pm).unwrap(), 0.0);
        assert_eq!(oos_r2(&y, &y, &pm).unwrap(), 1.0);
        let yhat = rand_vec(50, 2);
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..50 {
            a += (y[i] - yhat[i]) * (y[i] - yhat[i]);
            b += (y[i] - pm[i]) * (y[i] - pm[i]);
        }
        assert!((oos_r2(&y, &yhat, &pm).unwrap() - (1.0 - a / b)).abs() < 1e-12);
        assert!(oos_r2(&[1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn sharpe_cases() {
        assert!(matches!(sharpe(&[0.01; 10], 252), Err(MetricsError::ZeroVariance)));
        // mean 0.001, sd 0.01
        let r = [0.001 + 0.01, 0.001 - 0.01, 0.001 + 0.01, 0.001 - 0.01];
        let sd = sample_sd(&r);
        let expected = 0.001 / sd * 252f64.sqrt();
        assert!((sharpe(&r, 252).unwrap() - expected).abs() < 1e-12);
        let r2 = [0.011, -0.009];
        let s = sharpe(&r2, 252).unwrap();
        assert!((s - 0.001 / (0.02 / 2f64.sqrt()) * 252f64.sqrt()).abs() < 1e-12);
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!((sharpe(&neg, 12).unwrap() + sharpe(&r, 12).unwrap()).abs() < 1e-15);
        assert!((annualized_return(&neg, 12).unwrap() + annualized_return(&r, 12).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn sharpe_arithmetic_example() {
        let ratio: f64 = 0.1 * 252f64.sqrt();
        assert!((ratio - 1.587).abs() < 1e-3);
    }

    #[test]
    fn omega_cases() {
        let th = 0.003;
        assert!((omega(&[th + 0.01, th - 0.01], th).unwrap() - 1.0).abs() < 1e-12);
        assert!((omega(&[th + 2.0, th - 1.0], th).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(omega(&[0.1, 0.2], 0.0).unwrap(), f64::INFINITY);
        let r = rand_vec(300, 3);
        let (mut up, mut down) = (0.0, 0.0);
        for v in &r {
            if *v > th {
                up += v - th;
            } else {
                down += th - v;
            }
        }
        assert!((omega(&r, th).unwrap() - up / down).abs() < 1e-12);
    }

    #[test]
    fn drawdown_cases() {
        assert_eq!(max_drawdown(&[0.01, 0.02, 0.0]).unwrap(), 0.0);
        let dd = max_drawdown(&[0.1, -0.5]).unwrap();
        assert!((dd - 2f64.ln()).abs() < 1e-12);
        assert!(max_drawdown(&[0.1, -1.0]).is_err());
    }

    fn drawdown_oracle(r: &[f64]) -> f64 {
        let mut y = vec![0.0];
        for v in r {
            y.push(y.last().unwrap() + (1.0 + v).ln());
        }
        let mut best = 0.0f64;
        for i in 0..y.len() {
            for j in i..y.len() {
                best = best.max(y[i] - y[j]);
            }
        }
        best
    }

    #[test]
    fn drawdown_matches_quadratic_oracle() {
        for seed in 0..10 {
            let r = rand_vec(200, 100 + seed);
            assert!((max_drawdown(&r).unwrap() - drawdown_oracle(&r)).abs() < 1e-12);
        }
    }

    #[test]
    fn drawdown_unchanged_by_new_peak() {
        let mut r = rand_vec(100, 7);
        let before = max_drawdown(&r).unwrap();
        r.push(10.0);
        assert_eq!(max_drawdown(&r).unwrap(), before);
    }

    fn dates(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:03}")).collect()
    }

    #[test]
    fn slices_recombine() {
        let y = rand_vec(60, 4);
        let yhat = rand_vec(60, 5);
        let pm = vec![0.0005; 60];
        let d = dates(60);
        let a = SliceSpec {
            name: "covid".into(),
            ranges: vec![("010".into(), "019".into())],
            complement: false,
        };
        let b = SliceSpec {
            complement: true,
            name: "rest".into(),
            ..a.clone()
        };
        let full = SliceSpec {
            name: "all".into(),
            ranges: vec![("000".into(), "999".into())],
            complement: false,
        };
        let out = slice_r2(&d, &y, &yhat, &pm, &[a.clone(), b.clone(), full]).unwrap();
        assert!((out["all"] - oos_r2(&y, &yhat, &pm).unwrap()).abs() < 1e-15);

        let ia = a.resolve(&d).unwrap();
        let ib = b.resolve(&d).unwrap();
        let part = |idx: &[usize], f: &[f64]| idx.iter().map(|&i| (y[i] - f[i]).powi(2)).sum::<f64>() / idx.len() as f64;
        let pooled_model = (part(&ia, &yhat) * ia.len() as f64 + part(&ib, &yhat) * ib.len() as f64) / 60.0;
        let pooled_pm = (part(&ia, &pm) * ia.len() as f64 + part(&ib, &pm) * ib.len() as f64) / 60.0;
        assert!((pooled_model - mse(&y, &yhat)).abs() < 1e-12);
        assert!((pooled_pm - mse(&y, &pm)).abs() < 1e-12);

        let single = SliceSpec {
            name: "one".into(),
            ranges: vec![("005".into(), "005".into())],
            complement: false,
        };
        assert!(slice_r2(&d, &y, &yhat, &pm, &[single]).unwrap()["one"].is_finite());
        let empty = SliceSpec {
            name: "none".into(),
            ranges: vec![("x".into(), "y".into())],
            complement: false,
        };
        assert!(matches!(slice_r2(&d, &y, &yhat, &pm, &[empty]), Err(MetricsError::EmptySlice(_))));
    }

    #[test]
    fn ar1_recovers_coefficient() {
        for (phi, seed) in [(-0.45, 1), (0.0, 2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = crate::synth::ar1(10_000, phi, &mut rng);
            let d = ar1_hac(&x).unwrap();
            assert!((d.coefficient - phi).abs() < 3.0 * d.hac_std_error, "{phi}: {d:?}");
            assert_eq!(d.lags, 11);
        }
        assert!(ar1_hac(&[0.0; 5]).is_err());
    }

    #[test]
    fn bundle_json_is_stable() {
        let r = rand_vec(120, 8);
        let d = dates(120);
        let pm = vec![0.0; 120];
        let yhat = rand_vec(120, 9);
        let eval = ForecastEval {
            dates: &d,
            y: &r,
            yhat: &yhat,
            pm: &pm,
            slices: &[],
        };
        let a = MetricsBundle::compute(&r, 252, 0.0, Some(eval)).unwrap();
        let b = MetricsBundle::compute(&r, 252, 0.0, Some(eval)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.to_json().contains("\"r2_oos\""));
        let flat = MetricsBundle::compute(&[0.0; 10], 12, 0.0, None).unwrap();
        assert_eq!(flat.sharpe, None);
        assert_eq!(flat.max_drawdown, 0.0);
    }

    #[test]
    fn dirichlet_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = dirichlet_weights(7, &mut rng);
            assert!(w.iter().all(|v| *v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn small_forest() -> ForestConfig {
        ForestConfig {
            n_trees: 20,
            min_node_size: 20,
            block_size: 25,
            ..ForestConfig::monthly()
        }
    }

    #[test]
    fn baseline_reproducible_and_sized() {
        let panel = crate::synth::null_factor_panel(4, 400, 1.0, 0.01, 3);
        let spec = BaselineSpec {
            features: BaselineFeatures::Lags {
                max_lag: 3,
                marx: false,
                horizon: 1,
            },
            n_random: 3,
            nonneg: true,
            forest: small_forest(),
            split: 300,
            seed: 5,
        };
        let a = random_baseline(panel.values(), &spec).unwrap();
        let b = random_baseline(panel.values(), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws.len(), 3 + 4);
        assert!(a.top_in_sample.is_some());
        let signed = random_baseline(panel.values(), &BaselineSpec { nonneg: false, ..spec }).unwrap();
        assert!(signed.draws.iter().any(|d| d.weights.iter().any(|w| *w < 0.0)));
    }

    proptest! {
        #[test]
        fn omega_decreases_in_threshold(seed in 0u64..500, lo in -0.02f64..0.0, step in 0.0f64..0.02) {
            let r = rand_vec(80, seed);
            let a = omega(&r, lo).unwrap();
            let b = omega(&r, lo + step).unwrap();
            prop_assert!(b <= a + 1e-12);
        }
    }
}
