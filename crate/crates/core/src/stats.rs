//! Small-sample regression utilities: QR-based OLS, Newey-West covariance
//! and a spanning-regression report.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need more observations ({t}) than regressors ({k})")]
    TooFewObservations { t: usize, k: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("{rows} regressor rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Intercept first when fitted.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub hac_std_errors: Option<Vec<f64>>,
    pub hac_lags: Option<usize>,
    pub r2: f64,
    pub residuals: Vec<f64>,
    pub t: usize,
    pub k: usize,
    pub intercept: bool,
}

/// Prepends a column of ones when `intercept`.
pub fn design(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return x.clone();
    }
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.view_mut((0, 1), x.shape()).copy_from(x);
    d
}

/// `(X'X)^-1` from the triangular factor of a QR decomposition.
fn bread(design: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = design.clone().qr();
    let r = qr.r();
    check_rank(&r)?;
    let r_inv = r.try_inverse().ok_or(StatsError::RankDeficient)?;
    Ok(&r_inv * r_inv.transpose())
}

fn check_rank(r: &DMatrix<f64>) -> Result<()> {
    let diag: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 || diag.iter().any(|&d| d <= 1e-10 * max) {
        return Err(StatsError::RankDeficient);
    }
    Ok(())
}

/// Least squares through a QR decomposition.
pub fn ols(y: &[f64], x: &DMatrix<f64>, intercept: bool) -> Result<RegressionResult> {
    if x.nrows() != y.len() {
        return Err(StatsError::LengthMismatch {
            rows: x.nrows(),
            targets: y.len(),
        });
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let d = design(x, intercept);
    let (t, k) = d.shape();
    if t <= k {
        return Err(StatsError::TooFewObservations { t, k });
    }
    let qr = d.clone().qr();
    let r = qr.r();
    check_rank(&r)?;
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(StatsError::RankDeficient)?;
    let fitted = &d * &beta;
    let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let ssr: f64 = residuals.iter().map(|e| e * e).sum();
    let sst: f64 = if intercept {
        let m = y.iter().sum::<f64>() / t as f64;
        y.iter().map(|v| (v - m).powi(2)).sum()
    } else {
        y.iter().map(|v| v * v).sum()
    };
    let sigma2 = ssr / (t - k) as f64;
    let r_inv = r.try_inverse().ok_or(StatsError::RankDeficient)?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let std_errors = (0..k).map(|i| (sigma2 * xtx_inv[(i, i)]).sqrt()).collect();
    Ok(RegressionResult {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        hac_std_errors: None,
        hac_lags: None,
        r2: if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN },
        residuals,
        t,
        k,
        intercept,
    })
}

/// Bartlett kernel weight for autocovariance lag `l` under truncation `lags`.
pub fn bartlett_weight(l: usize, lags: usize) -> f64 {
    (1.0 - l as f64 / (lags as f64 + 1.0)).max(0.0)
}

/// `floor(4 (T/100)^(2/9))`.
pub fn default_nw_lags(t: usize) -> usize {
    (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Newey-West sandwich covariance of the coefficients. `x` is the regressor
/// matrix without the intercept column; `lags = 0` gives White's estimator.
pub fn newey_west(result: &RegressionResult, x: &DMatrix<f64>, lags: usize) -> Result<DMatrix<f64>> {
    let d = design(x, result.intercept);
    if d.nrows() != result.residuals.len() {
        return Err(StatsError::LengthMismatch {
            rows: d.nrows(),
            targets: result.residuals.len(),
        });
    }
    let (t, k) = d.shape();
    let e = &result.residuals;
    let scores: Vec<DVector<f64>> = (0..t).map(|i| d.row(i).transpose() * e[i]).collect();
    let mut meat = DMatrix::zeros(k, k);
    for s in &scores {
        meat += s * s.transpose();
    }
    for l in 1..=lags.min(t.saturating_sub(1)) {
        let w = bartlett_weight(l, lags);
        let mut gamma = DMatrix::zeros(k, k);
        for i in l..t {
            gamma += &scores[i] * scores[i - l].transpose();
        }
        meat += (&gamma + gamma.transpose()) * w;
    }
    let b = bread(&d)?;
    Ok(&b * meat * &b)
}

/// Adds HAC standard errors with `lags` (default rule when `None`).
pub fn with_hac(mut result: RegressionResult, x: &DMatrix<f64>, lags: Option<usize>) -> Result<RegressionResult> {
    let lags = lags.unwrap_or_else(|| default_nw_lags(result.t));
    let cov = newey_west(&result, x, lags)?;
    result.hac_std_errors = Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect());
    result.hac_lags = Some(lags);
    Ok(result)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            rows: a.len(),
            targets: b.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Two-sided normal p-value of a t statistic.
pub fn p_value(t_stat: f64) -> f64 {
    let n = Normal::standard();
    2.0 * (1.0 - n.cdf(t_stat.abs()))
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub stars: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rows: Vec<CoefficientRow>,
    pub r2: f64,
    pub t: usize,
    pub hac_lags: Option<usize>,
}

impl RegressionReport {
    /// Uses HAC standard errors when available.
    pub fn new(result: &RegressionResult, names: &[String]) -> Self {
        let se = result.hac_std_errors.as_ref().unwrap_or(&result.std_errors);
        let mut labels = Vec::new();
        if result.intercept {
            labels.push("alpha".to_owned());
        }
        labels.extend(names.iter().cloned());
        let rows = result
            .coefficients
            .iter()
            .zip(se)
            .zip(labels)
            .map(|((&b, &s), name)| {
                let t_stat = b / s;
                let p = p_value(t_stat);
                CoefficientRow {
                    name,
                    estimate: b,
                    std_error: s,
                    t_stat,
                    p_value: p,
                    stars: stars(p).to_owned(),
                }
            })
            .collect();
        Self {
            rows,
            r2: result.r2,
            t: result.t,
            hac_lags: result.hac_lags,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>12} {:>8}\n", "", "estimate", "std.err", "t");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>9.5}{:<3} {:>12.5} {:>8.2}\n",
                r.name, r.estimate, r.stars, r.std_error, r.t_stat
            ));
        }
        out.push_str(&format!("R2 {:.4}  T {}", self.r2, self.t));
        if let Some(l) = self.hac_lags {
            out.push_str(&format!("  Newey-West lags {l}"));
        }
        out.push_str("\n*** p<0.01; ** p<0.05; * p<0.1\n");
        out
    }
}

/// Regression of strategy returns on factor returns with HAC errors.
pub fn spanning_regression(
    strategy: &[f64],
    factors: &DMatrix<f64>,
    names: &[String],
    lags: Option<usize>,
) -> Result<RegressionReport> {
    let fit = with_hac(ols(strategy, factors, true)?, factors, lags)?;
    Ok(RegressionReport::new(&fit, names))
}
