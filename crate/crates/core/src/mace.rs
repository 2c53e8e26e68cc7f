//! Alternating forest / ridge estimation of a maximally predictable
//! portfolio, with early stopping, endogenous lag features, stochastic
//! observation weights and bagging of whole strategies.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, FeatureMatrix, Horizon, ReturnsPanel};
use crate::forest::{fit_forest, Forest, ForestConfig, ForestError};
use crate::ridge::{
    calibrate_lambda, normalize_variance, rescale_budget, CalibrationStatus, RidgeConfig,
    RidgeError, WeightVector,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MaceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("forest step failed at iteration {iteration}: {source}")]
    Forest {
        iteration: usize,
        #[source]
        source: ForestError,
    },
    #[error("ridge step failed at iteration {iteration}: {source}")]
    Ridge {
        iteration: usize,
        #[source]
        source: RidgeError,
    },
    #[error("initialization failed: {0}")]
    Init(RidgeError),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("exogenous mode needs a feature matrix")]
    MissingFeatures,
    #[error("expected {expected} feature rows, found {found}")]
    FeatureRows { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model artifact format {found} is not supported (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MaceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stopping {
    #[serde(alias = "fixed")]
    FixedSMax,
    EarlyOob,
    WeightConverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FeatureMode {
    Exogenous,
    /// Lags 1..=max_lag of the current portfolio series, optionally rotated
    /// into moving averages.
    EndogenousLags { max_lag: usize, marx: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Init {
    EqualWeight,
    /// Global minimum variance with the covariance mixed toward its diagonal.
    MinVariance { shrinkage: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaceConfig {
    pub eta: f64,
    pub s_max: usize,
    pub stopping: Stopping,
    pub mode: FeatureMode,
    pub init: Init,
    #[serde(default)]
    pub horizon: Horizon,
    pub forest: ForestConfig,
    pub ridge: RidgeConfig,
    /// Constant added to the ridge target; switches the intercept off.
    pub xi: f64,
    pub stochastic_weights: bool,
    pub bag_size: usize,
    pub seed: u64,
    /// Bring the ridge portfolio to unit variance before mixing it with the
    /// previous one, so `eta` is a step on a common scale.
    #[serde(default)]
    pub unit_scale_step: bool,
}

impl Default for MaceConfig {
    fn default() -> Self {
        Self::monthly()
    }
}

impl MaceConfig {
    pub fn monthly() -> Self {
        Self {
            eta: 0.1,
            s_max: 100,
            stopping: Stopping::FixedSMax,
            mode: FeatureMode::Exogenous,
            init: Init::EqualWeight,
            horizon: Horizon::default(),
            forest: ForestConfig::monthly(),
            ridge: RidgeConfig {
                target_r2: 0.05,
                ..RidgeConfig::default()
            },
            xi: 1.0,
            stochastic_weights: false,
            bag_size: 1,
            seed: 0,
            unit_scale_step: false,
        }
    }

    /// Daily preset for 20 to 50 assets.
    pub fn daily_20() -> Self {
        Self {
            eta: 0.01,
            s_max: 250,
            stopping: Stopping::EarlyOob,
            mode: FeatureMode::EndogenousLags {
                max_lag: 20,
                marx: true,
            },
            init: Init::MinVariance { shrinkage: 0.1 },
            horizon: Horizon::default(),
            forest: ForestConfig::daily(),
            ridge: RidgeConfig {
                nonneg: false,
                target_r2: 0.01,
                ..RidgeConfig::default()
            },
            xi: 0.0,
            stochastic_weights: false,
            bag_size: 1,
            seed: 0,
            unit_scale_step: false,
        }
    }

    pub fn daily_100() -> Self {
        Self {
            eta: 0.05,
            s_max: 500,
            ..Self::daily_20()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MaceError::Config(m.to_owned()));
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.s_max == 0 {
            return bad("s_max must be at least 1");
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad("xi must be finite and non-negative");
        }
        if self.bag_size == 0 {
            return bad("bag_size must be at least 1");
        }
        if let FeatureMode::EndogenousLags { max_lag, .. } = self.mode {
            if max_lag == 0 {
                return bad("max_lag must be at least 1");
            }
        }
        if let Init::MinVariance { shrinkage } = self.init {
            if !(0.0..=1.0).contains(&shrinkage) {
                return bad("min-variance shrinkage must lie in [0, 1]");
            }
        }
        self.forest
            .validate()
            .map_err(|e| MaceError::Config(e.to_string()))?;
        self.ridge
            .validate()
            .map_err(|e| MaceError::Config(e.to_string()))?;
        Ok(())
    }

    /// Ridge settings actually used: the tilt disables the intercept.
    pub fn effective_ridge(&self) -> RidgeConfig {
        RidgeConfig {
            intercept: self.ridge.intercept && self.xi == 0.0,
            ..self.ridge.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub s: usize,
    /// Mean squared gap between the scaled portfolio and the smoothed fit.
    pub in_sample_loss: f64,
    /// Out-of-bag RMSE relative to the standard deviation of the target.
    pub oob_rmse: f64,
    pub delta_w: f64,
    pub lambda: f64,
    pub calibration: CalibrationStatus,
    /// Rows without out-of-bag coverage, filled from the full forest.
    pub filled_rows: usize,
}

/// Intermediate state exposed to observers after every iteration.
#[derive(Debug)]
pub struct IterationState<'a> {
    pub s: usize,
    pub f_star: &'a [f64],
    pub f_hat_prev: &'a [f64],
    pub f_hat: &'a [f64],
    pub z_hat: &'a [f64],
    pub w: &'a [f64],
    pub ridge_weights: &'a [f64],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaceModel {
    pub format_version: u32,
    pub config: MaceConfig,
    pub assets: Vec<String>,
    pub feature_names: Vec<String>,
    pub w: WeightVector,
    pub forest: Forest,
    /// Smoothed forest predictions on the estimation rows.
    pub f_hat: Vec<f64>,
    /// Unit-variance portfolio over the whole training window.
    pub z_hat: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub best_s: usize,
    /// Leading training rows without a forest row (lag burn-in).
    pub offset: usize,
    pub min_variance_shrinkage: Option<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic child seed for stream `k` of `base`.
pub fn derive_seed(base: u64, k: u64) -> u64 {
    splitmix(splitmix(base) ^ k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn any_non_finite(v: &[f64]) -> bool {
    v.iter().any(|x| !x.is_finite())
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Sample covariance with divisor `T - 1`.
pub fn sample_covariance(values: &DMatrix<f64>) -> DMatrix<f64> {
    let t = values.nrows() as f64;
    let means = values.row_mean();
    let mut centred = values.clone();
    for mut row in centred.row_iter_mut() {
        row -= &means;
    }
    centred.transpose() * &centred / (t - 1.0)
}

/// `S^-1 i / (i' S^-1 i)` for `S = (1 - delta) cov + delta diag(cov)`.
/// When `S` is not positive definite, delta is raised until it is; the
/// delta actually used is returned.
pub fn min_variance_weights(cov: &DMatrix<f64>, delta: f64) -> Result<(Vec<f64>, f64)> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(MaceError::Shape("covariance must be square".into()));
    }
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    let mut d = delta;
    loop {
        let s = cov * (1.0 - d) + &diag * d;
        if let Some(ch) = s.cholesky() {
            let x = ch.solve(&DVector::from_element(n, 1.0));
            let sum = x.sum();
            if sum.is_finite() && sum > 0.0 {
                return Ok((x.iter().map(|v| v / sum).collect(), d));
            }
        }
        if d >= 1.0 {
            return Err(MaceError::Init(RidgeError::ZeroVariancePortfolio));
        }
        d = if d < 1e-4 { 1e-4 } else { (d * 10.0).min(1.0) };
    }
}

/// Starting weights (unit-variance) and the starting portfolio series.
pub fn initialize(returns: &ReturnsPanel, config: &MaceConfig) -> Result<(WeightVector, Vec<f64>)> {
    let (w, _) = initial_weights(returns.values(), returns.values(), config)?;
    let z = data::portfolio_returns(returns.values(), &w.w);
    Ok((w, z))
}

/// Initial weights using `cov_rows` for the covariance and `returns` for
/// the variance normalization.
fn initial_weights(
    returns: &DMatrix<f64>,
    cov_rows: &DMatrix<f64>,
    config: &MaceConfig,
) -> Result<(WeightVector, Option<f64>)> {
    let n = returns.ncols();
    let (raw, used) = match config.init {
        Init::EqualWeight => (vec![1.0 / n as f64; n], None),
        Init::MinVariance { shrinkage } => {
            let (w, d) = min_variance_weights(&sample_covariance(cov_rows), shrinkage)?;
            (w, Some(d))
        }
    };
    let w = normalize_variance(&raw, returns).map_err(MaceError::Init)?;
    Ok((w, used))
}

/// Observation weights for iteration `s`: all ones once `s > s_max / 3`,
/// otherwise iid Gamma(s, 1/s) draws (mean 1, variance 1/s).
pub fn stochastic_obs_weights<R: Rng + ?Sized>(s: usize, t: usize, s_max: usize, rng: &mut R) -> Vec<f64> {
    let s = s.max(1);
    if 3 * s > s_max {
        return vec![1.0; t];
    }
    let gamma = Gamma::new(s as f64, 1.0 / s as f64).expect("positive shape and scale");
    (0..t).map(|_| rng.sample(gamma)).collect()
}

struct Design<'a> {
    returns: &'a DMatrix<f64>,
    exogenous: Option<&'a DMatrix<f64>>,
    offset: usize,
}

impl Design<'_> {
    fn features(&self, z_hat: &[f64], mode: FeatureMode, h: usize) -> Result<DMatrix<f64>> {
        match (mode, self.exogenous) {
            (FeatureMode::Exogenous, Some(x)) => Ok(x.clone()),
            (FeatureMode::Exogenous, None) => Err(MaceError::MissingFeatures),
            (FeatureMode::EndogenousLags { max_lag, marx }, _) => {
                let lags = data::lag_matrix(z_hat, max_lag, h)?;
                Ok(if marx { data::marx(&lags) } else { lags })
            }
        }
    }
}

fn endogenous_offset(mode: FeatureMode, h: usize) -> usize {
    match mode {
        FeatureMode::Exogenous => 0,
        FeatureMode::EndogenousLags { max_lag, .. } => h + max_lag - 1,
    }
}

fn feature_names(mode: FeatureMode, features: Option<&FeatureMatrix>) -> Vec<String> {
    match mode {
        FeatureMode::Exogenous => features.map(|f| f.names().to_vec()).unwrap_or_default(),
        FeatureMode::EndogenousLags { max_lag, marx } => {
            let prefix = if marx { "marx" } else { "lag" };
            (1..=max_lag).map(|p| format!("{prefix}_{p}")).collect()
        }
    }
}

/// Runs the alternation. In exogenous mode `features` must have one row
/// per return row (already paired with the horizon).
pub fn fit(returns: &ReturnsPanel, features: Option<&FeatureMatrix>, config: &MaceConfig) -> Result<MaceModel> {
    fit_with_observer(returns, features, config, |_| {})
}

pub fn fit_with_observer(
    returns: &ReturnsPanel,
    features: Option<&FeatureMatrix>,
    config: &MaceConfig,
    observer: impl FnMut(&IterationState<'_>),
) -> Result<MaceModel> {
    config.validate()?;
    let (w0, shrink) = initial_weights(returns.values(), returns.values(), config)?;
    run(returns, features, config, w0, shrink, observer)
}

struct Snapshot {
    w: WeightVector,
    forest: Forest,
    f_hat: Vec<f64>,
    z_hat: Vec<f64>,
    s: usize,
}

fn run(
    returns: &ReturnsPanel,
    features: Option<&FeatureMatrix>,
    config: &MaceConfig,
    w0: WeightVector,
    shrinkage: Option<f64>,
    mut observer: impl FnMut(&IterationState<'_>),
) -> Result<MaceModel> {
    let r = returns.values();
    let t = r.nrows();
    let h = config.horizon.get();
    let exogenous = match (config.mode, features) {
        (FeatureMode::Exogenous, None) => return Err(MaceError::MissingFeatures),
        (FeatureMode::Exogenous, Some(f)) => {
            if f.n_rows() != t {
                return Err(MaceError::FeatureRows {
                    expected: t,
                    found: f.n_rows(),
                });
            }
            Some(f.values())
        }
        _ => None,
    };
    let offset = endogenous_offset(config.mode, h);
    if offset + 2 > t {
        return Err(MaceError::Data(DataError::TooFewPeriods {
            needed: offset + 2,
            found: t,
        }));
    }
    let design = Design {
        returns: r,
        exogenous,
        offset,
    };
    let window = design.returns.rows(design.offset, t - design.offset).into_owned();
    let ridge_cfg = config.effective_ridge();
    let eta = config.eta;

    let mut w = w0;
    let mut z_hat = data::portfolio_returns(r, &w.w);
    let mut f_hat: Vec<f64> = vec![0.0; t - offset];
    let mut history = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut best_rmse = f64::INFINITY;
    let mut last_forest = None;

    for s in 1..=config.s_max {
        let x = design.features(&z_hat, config.mode, h)?;
        let target = &z_hat[offset..];
        let target_sd = std_dev(target);
        let forest_cfg = ForestConfig {
            seed: derive_seed(config.forest.seed ^ config.seed, s as u64),
            ..config.forest.clone()
        };
        let forest = fit_forest(&x, target, &forest_cfg).map_err(|source| MaceError::Forest { iteration: s, source })?;
        let (f_star, filled) = forest
            .oob_filled(&x)
            .map_err(|source| MaceError::Forest { iteration: s, source })?;
        let oob_rmse = forest
            .oob_rmse(target)
            .map_err(|source| MaceError::Forest { iteration: s, source })?
            / target_sd;
        if any_non_finite(&f_star) || !oob_rmse.is_finite() {
            return Err(MaceError::NonFinite {
                iteration: s,
                what: "forest prediction",
            });
        }

        let step = if s == 1 { 1.0 } else { eta };
        let f_prev = std::mem::take(&mut f_hat);
        f_hat = f_star
            .iter()
            .zip(&f_prev)
            .map(|(a, b)| step * a + (1.0 - step) * b)
            .collect();

        let ridge_target: Vec<f64> = f_hat.iter().map(|v| v + config.xi).collect();
        let kappa = config.stochastic_weights.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1_000_000 + s as u64));
            stochastic_obs_weights(s, ridge_target.len(), config.s_max, &mut rng)
        });
        let cal = calibrate_lambda(&window, &ridge_target, &ridge_cfg, kappa.as_deref())
            .map_err(|source| MaceError::Ridge { iteration: s, source })?;
        let mut w_star = cal.fit.weights.w;
        if any_non_finite(&w_star) {
            return Err(MaceError::NonFinite {
                iteration: s,
                what: "ridge weights",
            });
        }
        if config.unit_scale_step {
            w_star = normalize_variance(&w_star, r)
                .map_err(|source| MaceError::Ridge { iteration: s, source })?
                .w;
        }
        let mixed: Vec<f64> = w_star
            .iter()
            .zip(&w.w)
            .map(|(a, b)| eta * a + (1.0 - eta) * b)
            .collect();
        let w_new = normalize_variance(&mixed, r).map_err(|source| MaceError::Ridge { iteration: s, source })?;
        let delta_w = w_new
            .w
            .iter()
            .zip(&w.w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = w_new;
        z_hat = data::portfolio_returns(r, &w.w);
        if any_non_finite(&z_hat) {
            return Err(MaceError::NonFinite {
                iteration: s,
                what: "portfolio series",
            });
        }
        let in_sample_loss = z_hat[offset..]
            .iter()
            .zip(&f_hat)
            .map(|(z, f)| (z - f).powi(2))
            .sum::<f64>()
            / f_hat.len() as f64;
        history.push(IterationRecord {
            s,
            in_sample_loss,
            oob_rmse,
            delta_w,
            lambda: cal.lambda,
            calibration: cal.status,
            filled_rows: filled,
        });
        observer(&IterationState {
            s,
            f_star: &f_star,
            f_hat_prev: &f_prev,
            f_hat: &f_hat,
            z_hat: &z_hat,
            w: &w.w,
            ridge_weights: &w_star,
        });

        match config.stopping {
            Stopping::EarlyOob => {
                if oob_rmse < best_rmse {
                    best_rmse = oob_rmse;
                    best = Some(Snapshot {
                        w: w.clone(),
                        forest,
                        f_hat: f_hat.clone(),
                        z_hat: z_hat.clone(),
                        s,
                    });
                }
            }
            Stopping::WeightConverged if delta_w < WEIGHT_TOL => {
                last_forest = Some(forest);
                break;
            }
            _ => last_forest = Some(forest),
        }
    }

    let snap = match best {
        Some(b) => b,
        None => Snapshot {
            s: history.len(),
            w,
            forest: last_forest.expect("at least one iteration ran"),
            f_hat,
            z_hat,
        },
    };
    Ok(MaceModel {
        format_version: MODEL_FORMAT_VERSION,
        config: config.clone(),
        assets: returns.assets().to_vec(),
        feature_names: feature_names(config.mode, features),
        w: snap.w,
        forest: snap.forest,
        f_hat: snap.f_hat,
        z_hat: snap.z_hat,
        history,
        best_s: snap.s,
        offset,
        min_variance_shrinkage: shrinkage,
    })
}

impl MaceModel {
    pub fn n_assets(&self) -> usize {
        self.w.len()
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// Weights used for trading: budget-rescaled when the sum is well
    /// defined, the unit-variance weights otherwise.
    pub fn traded_weights(&self) -> Vec<f64> {
        rescale_budget(&self.w.w).unwrap_or_else(|_| self.w.w.clone())
    }

    /// Factor turning a forecast of the unit-variance portfolio into a
    /// forecast of the traded portfolio.
    pub fn traded_scale(&self) -> f64 {
        match rescale_budget(&self.w.w) {
            Ok(_) => 1.0 / self.w.w.iter().sum::<f64>(),
            Err(_) => 1.0,
        }
    }

    /// Forest inputs for `returns`: the exogenous rows as given, or lags of
    /// the model portfolio. Returns the matrix and the number of leading
    /// return rows it skips.
    pub fn feature_rows(&self, returns: &DMatrix<f64>, features: Option<&DMatrix<f64>>) -> Result<(DMatrix<f64>, usize)> {
        if returns.ncols() != self.n_assets() {
            return Err(MaceError::Shape(format!(
                "model has {} assets, data has {}",
                self.n_assets(),
                returns.ncols()
            )));
        }
        let t = returns.nrows();
        match self.config.mode {
            FeatureMode::Exogenous => {
                let x = features.ok_or(MaceError::MissingFeatures)?;
                if x.nrows() != t {
                    return Err(MaceError::FeatureRows {
                        expected: t,
                        found: x.nrows(),
                    });
                }
                Ok((x.clone(), 0))
            }
            FeatureMode::EndogenousLags { max_lag, marx } => {
                let z = data::portfolio_returns(returns, &self.w.w);
                let h = self.config.horizon.get();
                let lags = data::lag_matrix(&z, max_lag, h)?;
                Ok((if marx { data::marx(&lags) } else { lags }, h + max_lag - 1))
            }
        }
    }

    /// Forecast of the unit-variance portfolio for each row of `returns`.
    ///
    /// Exogenous mode: `features` row `t` must be paired with return row
    /// `t`. Endogenous mode: lags of the model portfolio computed from
    /// `returns` itself, so the first `offset` rows have no forecast.
    pub fn forecast(&self, returns: &DMatrix<f64>, features: Option<&DMatrix<f64>>) -> Result<Vec<Option<f64>>> {
        let t = returns.nrows();
        let offset = endogenous_offset(self.config.mode, self.config.horizon.get());
        if t <= offset {
            return Ok(vec![None; t]);
        }
        let (x, skip) = self.feature_rows(returns, features)?;
        let p = self
            .forest
            .predict(&x)
            .map_err(|source| MaceError::Forest { iteration: 0, source })?;
        let mut out = vec![None; t];
        for (i, v) in p.into_iter().enumerate() {
            out[skip + i] = Some(v);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|source| MaceError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| MaceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let probe: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = probe
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != MODEL_FORMAT_VERSION {
            return Err(MaceError::FormatVersion {
                expected: MODEL_FORMAT_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(probe)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagOfStrategies {
    pub members: Vec<MaceModel>,
    pub member_seeds: Vec<u64>,
    /// Fraction of training rows used for each member's covariance.
    pub subsample_fraction: f64,
}

pub const BAG_SUBSAMPLE: f64 = 0.7;

/// Fits `config.bag_size` members with seeds derived from `config.seed`.
pub fn fit_bag(returns: &ReturnsPanel, features: Option<&FeatureMatrix>, config: &MaceConfig) -> Result<BagOfStrategies> {
    if config.bag_size < 2 {
        return Err(MaceError::Config("bagging needs bag_size >= 2".into()));
    }
    let seeds: Vec<u64> = (0..config.bag_size as u64).map(|b| derive_seed(config.seed, 2_000_000 + b)).collect();
    fit_bag_with_seeds(returns, features, config, &seeds)
}

/// One member per seed; each uses a min-variance start estimated on a
/// random 70% of the rows and stochastic observation weights.
pub fn fit_bag_with_seeds(
    returns: &ReturnsPanel,
    features: Option<&FeatureMatrix>,
    config: &MaceConfig,
    seeds: &[u64],
) -> Result<BagOfStrategies> {
    config.validate()?;
    if !matches!(config.init, Init::MinVariance { .. }) {
        return Err(MaceError::Config("bagging needs the min-variance initialization".into()));
    }
    let r = returns.values();
    let t = r.nrows();
    let keep = ((BAG_SUBSAMPLE * t as f64).round() as usize).clamp(2, t);
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let member_cfg = MaceConfig {
                seed,
                stochastic_weights: true,
                bag_size: 1,
                forest: ForestConfig {
                    seed: derive_seed(seed, 7),
                    ..config.forest.clone()
                },
                ..config.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
            let mut rows = index::sample(&mut rng, t, keep).into_vec();
            rows.sort_unstable();
            let sub = r.select_rows(rows.iter());
            let (w0, shrink) = initial_weights(r, &sub, &member_cfg)?;
            run(returns, features, &member_cfg, w0, shrink, |_| {})
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BagOfStrategies {
        members,
        member_seeds: seeds.to_vec(),
        subsample_fraction: BAG_SUBSAMPLE,
    })
}

/// `w_bag[t, j] = (1/B) sum_b positions[t, b] * weights[b][j]`.
pub fn collapse_weights(weights: &[Vec<f64>], positions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = weights.len();
    if b == 0 || positions.ncols() != b {
        return Err(MaceError::Shape(format!(
            "{} members but {} position columns",
            b,
            positions.ncols()
        )));
    }
    let n = weights[0].len();
    if weights.iter().any(|w| w.len() != n) {
        return Err(MaceError::Shape("members disagree on the number of assets".into()));
    }
    let stacked = DMatrix::from_fn(b, n, |i, j| weights[i][j]);
    Ok(positions * stacked / b as f64)
}

/// Effective per-asset weights of the bag, using each member's traded
/// weights.
pub fn collapse_bag(bag: &BagOfStrategies, positions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let weights: Vec<Vec<f64>> = bag.members.iter().map(|m| m.traded_weights()).collect();
    collapse_weights(&weights, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ridge::solve_ridge;
    use rand_distr::StandardNormal;

    fn gaussian_panel(t: usize, n: usize, seed: u64) -> ReturnsPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = DMatrix::from_fn(t, n, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        ReturnsPanel::from_matrix(values).unwrap()
    }

    fn small_config() -> MaceConfig {
        MaceConfig {
            eta: 0.5,
            s_max: 4,
            forest: ForestConfig {
                n_trees: 20,
                min_node_size: 10,
                block_size: 20,
                ..ForestConfig::monthly()
            },
            mode: FeatureMode::EndogenousLags { max_lag: 3, marx: false },
            xi: 0.0,
            ..MaceConfig::monthly()
        }
    }

    #[test]
    fn equal_weight_init_has_unit_variance() {
        let panel = gaussian_panel(200, 4, 1);
        let (w, z) = initialize(&panel, &MaceConfig::monthly()).unwrap();
        assert!(w.w.windows(2).all(|p| (p[0] - p[1]).abs() < 1e-15));
        assert!((std_dev(&z) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn min_variance_symmetric_pair() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let (w, _) = min_variance_weights(&cov, 0.1).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn min_variance_matches_closed_form() {
        let cov = DMatrix::from_row_slice(3, 3, &[0.04, 0.006, 0.002, 0.006, 0.09, -0.01, 0.002, -0.01, 0.0225]);
        let (w, d) = min_variance_weights(&cov, 0.0).unwrap();
        assert_eq!(d, 0.0);
        let inv = cov.clone().try_inverse().unwrap();
        let x = &inv * DVector::from_element(3, 1.0);
        let denom = x.sum();
        for i in 0..3 {
            assert!((w[i] - x[i] / denom).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_covariance_raises_shrinkage() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (w, d) = min_variance_weights(&cov, 0.0).unwrap();
        assert!(d > 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_cutoff_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(stochastic_obs_weights(34, 50, 100, &mut rng).iter().all(|&k| k == 1.0));
        let k1 = stochastic_obs_weights(1, 10_000, 100, &mut rng);
        let m = k1.iter().sum::<f64>() / 1e4;
        let v = k1.iter().map(|k| (k - m).powi(2)).sum::<f64>() / 9_999.0;
        assert!((m - 1.0).abs() < 0.05 && (v - 1.0).abs() < 0.15, "{m} {v}");
        for s in [2, 5, 10, 33] {
            let k = stochastic_obs_weights(s, 10_000, 100, &mut rng);
            let m = k.iter().sum::<f64>() / 1e4;
            assert!((m - 1.0).abs() < 0.05);
            assert!(k.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_step_unrolls_to_forest_plus_ridge() {
        let panel = gaussian_panel(300, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(300, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let feats = FeatureMatrix::new(panel.dates().to_vec(), vec!["a".into(), "b".into(), "c".into()], x.clone()).unwrap();
        let cfg = MaceConfig {
            eta: 1.0,
            s_max: 1,
            mode: FeatureMode::Exogenous,
            ..small_config()
        };
        let model = fit(&panel, Some(&feats), &cfg).unwrap();

        let (_, z0) = initialize(&panel, &cfg).unwrap();
        let fcfg = ForestConfig {
            seed: derive_seed(cfg.forest.seed ^ cfg.seed, 1),
            ..cfg.forest.clone()
        };
        let forest = fit_forest(&x, &z0, &fcfg).unwrap();
        let (f_star, _) = forest.oob_filled(&x).unwrap();
        assert_eq!(model.f_hat, f_star);
        let cal = calibrate_lambda(panel.values(), &f_star, &cfg.effective_ridge(), None).unwrap();
        let direct = solve_ridge(panel.values(), &f_star, cal.lambda, &cfg.effective_ridge(), None).unwrap();
        let w = normalize_variance(&direct.weights.w, panel.values()).unwrap();
        for (a, b) in model.w.w.iter().zip(&w.w) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn z_hat_unit_variance_and_f_hat_convex_every_iteration() {
        let panel = gaussian_panel(400, 4, 4);
        let cfg = small_config();
        let mut checked = 0;
        fit_with_observer(&panel, None, &cfg, |st| {
            assert!((std_dev(st.z_hat).powi(2) - 1.0).abs() < 1e-8);
            for ((f, a), b) in st.f_hat.iter().zip(st.f_star).zip(st.f_hat_prev) {
                if st.s > 1 {
                    assert!(*f >= a.min(*b) - 1e-12 && *f <= a.max(*b) + 1e-12);
                }
            }
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, cfg.s_max);
    }

    #[test]
    fn early_stopping_snapshot_reproduces() {
        let panel = gaussian_panel(400, 4, 5);
        let cfg = MaceConfig {
            stopping: Stopping::EarlyOob,
            s_max: 6,
            ..small_config()
        };
        let model = fit(&panel, None, &cfg).unwrap();
        assert_eq!(model.iterations(), 6);
        let argmin = model
            .history
            .iter()
            .min_by(|a, b| a.oob_rmse.partial_cmp(&b.oob_rmse).unwrap())
            .unwrap()
            .s;
        assert_eq!(model.best_s, argmin);
        let rerun = fit(
            &panel,
            None,
            &MaceConfig {
                stopping: Stopping::FixedSMax,
                s_max: model.best_s,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(rerun.w, model.w);
        assert_eq!(rerun.f_hat, model.f_hat);
        assert_eq!(rerun.z_hat, model.z_hat);
        assert_eq!(rerun.forest.trees(), model.forest.trees());
    }

    #[test]
    fn weight_convergence_stops_early() {
        let panel = gaussian_panel(300, 3, 6);
        let cfg = MaceConfig {
            stopping: Stopping::WeightConverged,
            eta: 1e-9,
            s_max: 10,
            ..small_config()
        };
        let model = fit(&panel, None, &cfg).unwrap();
        assert!(model.iterations() < 10);
        assert!(model.history.last().unwrap().delta_w < WEIGHT_TOL);
    }

    #[test]
    fn endogenous_forecast_is_causal() {
        let panel = gaussian_panel(300, 3, 7);
        let model = fit(&panel, None, &small_config()).unwrap();
        let full = model.forecast(panel.values(), None).unwrap();
        assert!(full[..model.offset].iter().all(Option::is_none));
        let mut poisoned = panel.values().clone();
        for j in 0..3 {
            poisoned[(299, j)] = 1e6;
        }
        let p = model.forecast(&poisoned, None).unwrap();
        assert_eq!(p[..299], full[..299]);
    }

    #[test]
    fn exogenous_requires_features() {
        let panel = gaussian_panel(100, 3, 8);
        let cfg = MaceConfig {
            mode: FeatureMode::Exogenous,
            ..small_config()
        };
        assert!(matches!(fit(&panel, None, &cfg), Err(MaceError::MissingFeatures)));
    }

    #[test]
    fn model_round_trips_through_disk() {
        let panel = gaussian_panel(200, 3, 10);
        let cfg = MaceConfig { s_max: 2, ..small_config() };
        let model = fit(&panel, None, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = MaceModel::load(&path).unwrap();
        assert_eq!(back.w, model.w);
        assert_eq!(back.forest.trees(), model.forest.trees());
        assert_eq!(back.history, model.history);

        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        v["format_version"] = 99.into();
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(MaceModel::load(&path), Err(MaceError::FormatVersion { found: 99, .. })));
    }

    fn bag_config() -> MaceConfig {
        MaceConfig {
            init: Init::MinVariance { shrinkage: 0.1 },
            s_max: 3,
            bag_size: 2,
            ..small_config()
        }
    }

    #[test]
    fn bag_members_deterministic_and_diverse() {
        let panel = gaussian_panel(300, 4, 11);
        let cfg = bag_config();
        let same = fit_bag_with_seeds(&panel, None, &cfg, &[5, 5]).unwrap();
        assert_eq!(same.members[0].w, same.members[1].w);
        let diff = fit_bag(&panel, None, &cfg).unwrap();
        let gap = diff.members[0]
            .w
            .w
            .iter()
            .zip(&diff.members[1].w.w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 0.0);
        let again = fit_bag(&panel, None, &cfg).unwrap();
        for (a, b) in diff.members.iter().zip(&again.members) {
            assert_eq!(a.w, b.w);
        }
    }

    #[test]
    fn bag_needs_min_variance_init() {
        let panel = gaussian_panel(200, 3, 12);
        let cfg = MaceConfig {
            init: Init::EqualWeight,
            ..bag_config()
        };
        assert!(matches!(fit_bag(&panel, None, &cfg), Err(MaceError::Config(_))));
    }

    #[test]
    fn collapse_single_member_and_mirror_image() {
        let w = vec![0.2, 0.3, 0.5];
        let pos = DMatrix::from_column_slice(3, 1, &[1.0, -0.5, 2.0]);
        let c = collapse_weights(&[w.clone()], &pos).unwrap();
        for t in 0..3 {
            for j in 0..3 {
                assert_eq!(c[(t, j)], pos[(t, 0)] * w[j]);
            }
        }
        let mirror: Vec<f64> = w.iter().map(|v| -v).collect();
        let pos2 = DMatrix::from_element(3, 2, 0.7);
        let c2 = collapse_weights(&[w, mirror], &pos2).unwrap();
        assert!(c2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(MaceConfig { eta: 0.0, ..MaceConfig::monthly() }.validate().is_err());
        assert!(MaceConfig { s_max: 0, ..MaceConfig::monthly() }.validate().is_err());
        assert!(MaceConfig { xi: -1.0, ..MaceConfig::monthly() }.validate().is_err());
        assert!(MaceConfig { bag_size: 0, ..MaceConfig::monthly() }.validate().is_err());
        MaceConfig::daily_20().validate().unwrap();
        MaceConfig::daily_100().validate().unwrap();
        assert!(!MaceConfig::monthly().effective_ridge().intercept);
    }

    #[test]
    fn config_serde_round_trip() {
        let cfg = MaceConfig::daily_20();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: MaceConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let st: Stopping = serde_json::from_str("\"fixed\"").unwrap();
        assert_eq!(st, Stopping::FixedSMax);
    }
}
