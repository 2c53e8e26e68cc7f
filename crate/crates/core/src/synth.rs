//! Synthetic data generators used by tests, examples and the bundled
//! dataset.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{index_dates, FeatureMatrix, ReturnsPanel};

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Returns whose only predictable direction is a hidden unit-variance
/// portfolio following a regime-switching AR(1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDgp {
    pub n_assets: usize,
    pub n_periods: usize,
    pub phi_high: f64,
    pub phi_low: f64,
    /// Probability of staying in the current regime each period.
    pub stay_prob: f64,
    /// Innovation scale in the high-volatility regime relative to the low one.
    pub vol_ratio: f64,
    /// Per-asset return scale.
    pub asset_scale: f64,
    pub seed: u64,
}

impl Default for PlantedDgp {
    fn default() -> Self {
        Self {
            n_assets: 20,
            n_periods: 3000,
            phi_high: -0.45,
            phi_low: 0.0,
            stay_prob: 0.98,
            vol_ratio: 2.0,
            asset_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub panel: ReturnsPanel,
    /// Weights with `w_star' r_t = z_t`.
    pub w_star: Vec<f64>,
    pub z: Vec<f64>,
    pub high_regime: Vec<bool>,
}

/// Random orthogonal matrix from the QR decomposition of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl PlantedDgp {
    pub fn generate(&self) -> PlantedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, t) = (self.n_assets, self.n_periods);
        let q = random_orthogonal(n, &mut rng);

        let mut high = false;
        let mut regime = Vec::with_capacity(t);
        let mut z = Vec::with_capacity(t);
        let mut prev = 0.0;
        for _ in 0..t {
            if rng.random::<f64>() > self.stay_prob {
                high = !high;
            }
            let (phi, sd) = if high {
                (self.phi_high, self.vol_ratio)
            } else {
                (self.phi_low, 1.0)
            };
            let v = phi * prev + sd * normal(&mut rng);
            z.push(v);
            regime.push(high);
            prev = v;
        }
        let mean = z.iter().sum::<f64>() / t as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t as f64 - 1.0)).sqrt();
        for v in &mut z {
            *v /= sd;
        }

        let mut values = DMatrix::zeros(t, n);
        for i in 0..t {
            let mut f = Vec::with_capacity(n);
            f.push(z[i]);
            f.extend((1..n).map(|_| normal(&mut rng)));
            for a in 0..n {
                let r: f64 = (0..n).map(|k| q[(a, k)] * f[k]).sum();
                values[(i, a)] = self.asset_scale * r;
            }
        }
        let w_star = (0..n).map(|a| q[(a, 0)] / self.asset_scale).collect();
        PlantedSample {
            panel: ReturnsPanel::from_matrix(values).expect("generated panel is valid"),
            w_star,
            z,
            high_regime: regime,
        }
    }
}

/// iid-over-time Gaussian returns with one common factor: asset `j` loads
/// `loading` on the factor plus unit idiosyncratic noise, all scaled by
/// `scale`.
pub fn null_factor_panel(n_assets: usize, n_periods: usize, loading: f64, scale: f64, seed: u64) -> ReturnsPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(n_periods, n_assets);
    for i in 0..n_periods {
        let f = normal(&mut rng);
        for j in 0..n_assets {
            values[(i, j)] = scale * (loading * f + normal(&mut rng));
        }
    }
    ReturnsPanel::from_matrix(values).expect("generated panel is valid")
}

/// Stationary Gaussian AR(1) with unit innovations, started from its
/// stationary distribution.
pub fn ar1(n: usize, phi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = normal(rng) / (1.0 - phi * phi).max(1e-12).sqrt();
    (0..n)
        .map(|_| {
            x = phi * x + normal(rng);
            x
        })
        .collect()
}

/// iid rows with a smooth nonlinear signal: `y = sin(2 x0) + x1^2 / 2 + e`.
pub fn smooth_regression(n: usize, k: usize, noise: f64, rng: &mut impl Rng) -> (DMatrix<f64>, Vec<f64>) {
    assert!(k >= 2, "need at least two features");
    let x = DMatrix::from_fn(n, k, |_, _| normal(rng));
    let y = (0..n)
        .map(|i| (2.0 * x[(i, 0)]).sin() + 0.5 * x[(i, 1)].powi(2) + noise * normal(rng))
        .collect();
    (x, y)
}

/// Small demo dataset: planted predictability in 8 assets over 1200
/// periods plus two exogenous indicators dated with the returns, one of
/// them informative about the next period.
pub fn bundled_dataset(seed: u64) -> (ReturnsPanel, FeatureMatrix) {
    let sample = PlantedDgp {
        n_assets: 8,
        n_periods: 1200,
        seed,
        ..PlantedDgp::default()
    }
    .generate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let t = sample.panel.n_periods();
    let mut x = DMatrix::zeros(t, 2);
    for i in 0..t {
        x[(i, 0)] = sample.z[i];
        x[(i, 1)] = normal(&mut rng);
    }
    let assets: Vec<String> = (1..=8).map(|j| format!("asset_{j}")).collect();
    let dates = index_dates(t);
    let panel = ReturnsPanel::new(dates.clone(), assets, sample.panel.values().clone()).expect("valid panel");
    let features = FeatureMatrix::new(dates, vec!["signal".into(), "noise".into()], x).expect("valid features");
    (panel, features)
}
