//! The portfolio side of the alternation: ridge regression of forest
//! predictions on asset returns, optionally long-only, with the penalty
//! calibrated to a target in-sample R² and the resulting portfolio scaled to
//! unit variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RidgeError {
    #[error("invalid ridge config: {0}")]
    Config(String),
    #[error("{rows} return rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("observation weights must be positive and finite")]
    BadObsWeights,
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("singular normal equations at lambda = 0 (collinear returns); use lambda > 0")]
    Singular,
    #[error("coordinate descent did not converge in {iterations} sweeps (KKT residual {kkt_residual:e})")]
    NotConverged { iterations: usize, kkt_residual: f64 },
    #[error("target has zero variance")]
    ZeroVarianceTarget,
    #[error("portfolio has zero variance")]
    ZeroVariancePortfolio,
    #[error("budget rescale undefined: weights sum to {0:e}")]
    BudgetUndefined(f64),
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, RidgeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    /// Enforce `w >= 0`.
    pub nonneg: bool,
    /// In-sample R² the penalty is calibrated to.
    pub target_r2: f64,
    pub intercept: bool,
    /// Cap on coordinate-descent sweeps.
    pub max_iter: usize,
    /// Relative coordinate-change tolerance.
    pub tol: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            nonneg: true,
            target_r2: 0.05,
            intercept: true,
            max_iter: 100_000,
            tol: 1e-12,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_r2 > 0.0 && self.target_r2 < 1.0) {
            return Err(RidgeError::Config("target_r2 must lie in (0, 1)".into()));
        }
        if !(self.tol > 0.0) {
            return Err(RidgeError::Config("tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(RidgeError::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Portfolio weights plus the factor that brought the portfolio to unit
/// variance (1 when no normalization was applied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub scale_applied: f64,
}

impl WeightVector {
    pub fn raw(w: Vec<f64>) -> Self {
        Self {
            w,
            scale_applied: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: WeightVector,
    pub intercept: f64,
    pub lambda: f64,
    /// Weighted sum of squared residuals plus the penalty.
    pub objective: f64,
    /// In-sample R², centred when an intercept is fitted, uncentred otherwise.
    pub r2: f64,
    /// Largest KKT violation relative to the gradient scale.
    pub kkt_residual: f64,
    pub sweeps: usize,
}

/// Weighted, optionally centred Gram system of one regression.
#[derive(Debug, Clone)]
pub struct RidgeSystem {
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    /// Total sum of squares of the (centred) target.
    tss: f64,
    x_mean: DVector<f64>,
    y_mean: f64,
    intercept: bool,
}

impl RidgeSystem {
    pub fn new(
        returns: &DMatrix<f64>,
        target: &[f64],
        intercept: bool,
        obs_weights: Option<&[f64]>,
    ) -> Result<Self> {
        let (t, n) = returns.shape();
        if t != target.len() {
            return Err(RidgeError::LengthMismatch {
                rows: t,
                targets: target.len(),
            });
        }
        if let Some(k) = obs_weights {
            if k.len() != t || k.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(RidgeError::BadObsWeights);
            }
        }
        if target.iter().any(|v| !v.is_finite()) || returns.iter().any(|v| !v.is_finite()) {
            return Err(RidgeError::NonFinite);
        }
        let kappa = |i: usize| obs_weights.map_or(1.0, |k| k[i]);
        let total: f64 = (0..t).map(kappa).sum();
        let mut x_mean = DVector::zeros(n);
        let mut y_mean = 0.0;
        if intercept {
            for i in 0..t {
                let k = kappa(i);
                y_mean += k * target[i];
                for j in 0..n {
                    x_mean[j] += k * returns[(i, j)];
                }
            }
            y_mean /= total;
            x_mean /= total;
        }
        let mut gram = DMatrix::zeros(n, n);
        let mut cross = DVector::zeros(n);
        let mut tss = 0.0;
        let mut row = vec![0.0; n];
        for i in 0..t {
            let k = kappa(i);
            for j in 0..n {
                row[j] = returns[(i, j)] - x_mean[j];
            }
            let y = target[i] - y_mean;
            tss += k * y * y;
            for a in 0..n {
                let ka = k * row[a];
                cross[a] += ka * y;
                for b in a..n {
                    gram[(a, b)] += ka * row[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        Ok(Self {
            gram,
            cross,
            tss,
            x_mean,
            y_mean,
            intercept,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.cross.len()
    }

    /// Weighted residual sum of squares at `w` (intercept profiled out).
    pub fn ssr(&self, w: &DVector<f64>) -> f64 {
        (self.tss - 2.0 * w.dot(&self.cross) + w.dot(&(&self.gram * w))).max(0.0)
    }

    pub fn r2(&self, w: &DVector<f64>) -> f64 {
        1.0 - self.ssr(w) / self.tss
    }

    pub fn tss(&self) -> f64 {
        self.tss
    }

    fn intercept_for(&self, w: &DVector<f64>) -> f64 {
        if self.intercept {
            self.y_mean - self.x_mean.dot(w)
        } else {
            0.0
        }
    }

    /// Relative KKT violation of `w` for the penalized problem.
    pub fn kkt_residual(&self, w: &DVector<f64>, lambda: f64, nonneg: bool) -> f64 {
        let hw = &self.gram * w + w * lambda;
        let grad = (&hw - &self.cross) * 2.0;
        let scale = 2.0 * self.cross.amax().max(hw.amax()).max(f64::MIN_POSITIVE);
        let worst = (0..w.len())
            .map(|j| {
                if nonneg && w[j] <= 0.0 {
                    (-grad[j]).max(0.0)
                } else {
                    grad[j].abs()
                }
            })
            .fold(0.0, f64::max);
        worst / scale
    }

    fn finish(&self, w: DVector<f64>, lambda: f64, nonneg: bool, sweeps: usize) -> RidgeFit {
        let ssr = self.ssr(&w);
        RidgeFit {
            intercept: self.intercept_for(&w),
            lambda,
            objective: ssr + lambda * w.norm_squared(),
            r2: 1.0 - ssr / self.tss,
            kkt_residual: self.kkt_residual(&w, lambda, nonneg),
            sweeps,
            weights: WeightVector::raw(w.iter().copied().collect()),
        }
    }

    /// Exact normal-equations solution of the unconstrained problem.
    pub fn solve_unconstrained(&self, lambda: f64) -> Result<RidgeFit> {
        check_lambda(lambda)?;
        let n = self.n_assets();
        let a = &self.gram + DMatrix::identity(n, n) * lambda;
        if lambda == 0.0 {
            let eig = a.clone().symmetric_eigenvalues();
            let max = eig.amax();
            if eig.min() <= 1e-12 * max.max(f64::MIN_POSITIVE) {
                return Err(RidgeError::Singular);
            }
        }
        let chol = a.cholesky().ok_or(RidgeError::Singular)?;
        let w = chol.solve(&self.cross);
        Ok(self.finish(w, lambda, false, 0))
    }

    /// Cyclic coordinate descent with clipping at zero.
    pub fn solve_nonneg(
        &self,
        lambda: f64,
        max_iter: usize,
        tol: f64,
        warm: Option<&[f64]>,
    ) -> Result<RidgeFit> {
        check_lambda(lambda)?;
        let n = self.n_assets();
        for j in 0..n {
            if self.gram[(j, j)] + lambda <= 0.0 {
                return Err(RidgeError::Singular);
            }
        }
        let mut w = match warm {
            Some(v) if v.len() == n => DVector::from_iterator(n, v.iter().map(|x| x.max(0.0))),
            _ => DVector::zeros(n),
        };
        let mut gw = &self.gram * &w;
        for sweep in 1..=max_iter {
            let (max_delta, max_w) = self.sweep(&mut w, &mut gw, lambda);
            if max_delta <= tol * max_w.max(f64::MIN_POSITIVE) {
                return Ok(self.finish(w, lambda, true, sweep));
            }
        }
        Err(RidgeError::NotConverged {
            iterations: max_iter,
            kkt_residual: self.kkt_residual(&w, lambda, true),
        })
    }

    /// One cyclic pass over the coordinates; `gw` tracks `G w`. Returns the
    /// largest coordinate change and the largest weight.
    fn sweep(&self, w: &mut DVector<f64>, gw: &mut DVector<f64>, lambda: f64) -> (f64, f64) {
        let n = w.len();
        let mut max_delta: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for j in 0..n {
            let gjj = self.gram[(j, j)];
            let partial = self.cross[j] - (gw[j] - gjj * w[j]);
            let new = (partial / (gjj + lambda)).max(0.0);
            let delta = new - w[j];
            if delta != 0.0 {
                for i in 0..n {
                    gw[i] += self.gram[(i, j)] * delta;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
            max_w = max_w.max(new.abs());
        }
        (max_delta, max_w)
    }

    pub fn solve(&self, lambda: f64, config: &RidgeConfig, warm: Option<&[f64]>) -> Result<RidgeFit> {
        if config.nonneg {
            self.solve_nonneg(lambda, config.max_iter, config.tol, warm)
        } else {
            self.solve_unconstrained(lambda)
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(RidgeError::BadLambda(lambda))
    }
}

/// Minimizes `sum_t k_t (target_t - b - w'r_t)^2 + lambda |w|^2`, with
/// `w >= 0` when `config.nonneg`. Weights are returned before any
/// variance normalization.
pub fn solve_ridge(
    returns: &DMatrix<f64>,
    target: &[f64],
    lambda: f64,
    config: &RidgeConfig,
    obs_weights: Option<&[f64]>,
) -> Result<RidgeFit> {
    let system = RidgeSystem::new(returns, target, config.intercept, obs_weights)?;
    system.solve(lambda, config, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationStatus {
    /// In-sample R² within tolerance of the target.
    Hit,
    /// Even the smallest lambda falls short of the target.
    Unattainable,
    /// Even the largest lambda exceeds the target.
    AboveAtMaxLambda,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub lambda: f64,
    pub fit: RidgeFit,
    pub status: CalibrationStatus,
}

pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e12;
const R2_TOL: f64 = 1e-4;

/// Bisection on `log10(lambda)` over `[1e-8, 1e12]` for the penalty whose
/// in-sample R² equals `config.target_r2`. R² is non-increasing in lambda.
pub fn calibrate_lambda(
    returns: &DMatrix<f64>,
    target: &[f64],
    config: &RidgeConfig,
    obs_weights: Option<&[f64]>,
) -> Result<Calibration> {
    config.validate()?;
    let mean = target.iter().sum::<f64>() / target.len().max(1) as f64;
    if target.iter().all(|&v| (v - mean).abs() <= 1e-300) {
        return Err(RidgeError::ZeroVarianceTarget);
    }
    let system = RidgeSystem::new(returns, target, config.intercept, obs_weights)?;
    calibrate_on(&system, config)
}

pub fn calibrate_on(system: &RidgeSystem, config: &RidgeConfig) -> Result<Calibration> {
    if !(system.tss() > 0.0) {
        return Err(RidgeError::ZeroVarianceTarget);
    }
    let goal = config.target_r2;
    let low = system.solve(LAMBDA_MIN, config, None)?;
    if low.r2 < goal - R2_TOL {
        return Ok(Calibration {
            lambda: LAMBDA_MIN,
            fit: low,
            status: CalibrationStatus::Unattainable,
        });
    }
    let high = system.solve(LAMBDA_MAX, config, None)?;
    if high.r2 > goal + R2_TOL {
        return Ok(Calibration {
            lambda: LAMBDA_MAX,
            fit: high,
            status: CalibrationStatus::AboveAtMaxLambda,
        });
    }
    let (mut lo, mut hi) = (LAMBDA_MIN.log10(), LAMBDA_MAX.log10());
    let mut best = if (low.r2 - goal).abs() <= (high.r2 - goal).abs() {
        low
    } else {
        high
    };
    for _ in 0..200 {
        if (best.r2 - goal).abs() <= R2_TOL || hi - lo < 1e-13 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let warm = best.weights.w.clone();
        let fit = system.solve(10f64.powf(mid), config, Some(&warm))?;
        if fit.r2 > goal {
            lo = mid;
        } else {
            hi = mid;
        }
        if (fit.r2 - goal).abs() < (best.r2 - goal).abs() || (fit.r2 - goal).abs() <= R2_TOL {
            best = fit;
        }
    }
    Ok(Calibration {
        lambda: best.lambda,
        status: if (best.r2 - goal).abs() <= 1e-3 {
            CalibrationStatus::Hit
        } else {
            CalibrationStatus::Unattainable
        },
        fit: best,
    })
}

fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scales `w` so that the portfolio `R w` has unit sample variance.
pub fn normalize_variance(w: &[f64], returns: &DMatrix<f64>) -> Result<WeightVector> {
    let p = crate::data::portfolio_returns(returns, w);
    if p.len() < 2 {
        return Err(RidgeError::ZeroVariancePortfolio);
    }
    let sd = sample_std(&p);
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(RidgeError::ZeroVariancePortfolio);
    }
    Ok(WeightVector {
        w: w.iter().map(|v| v / sd).collect(),
        scale_applied: 1.0 / sd,
    })
}

/// `w / sum(w)`; fails when the sum vanishes relative to `|w|_1`.
pub fn rescale_budget(w: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = w.iter().sum();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    if sum == 0.0 || !sum.is_finite() || sum.abs() <= 1e-10 * l1 {
        return Err(RidgeError::BudgetUndefined(sum));
    }
    Ok(w.iter().map(|v| v / sum).collect())
}
