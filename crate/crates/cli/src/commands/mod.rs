pub mod backtest;
pub mod baseline;
pub mod fit;
pub mod report;
pub mod shapley;
pub mod synth;

use nalgebra::DMatrix;

/// Rows `0..end` of a matrix.
pub(crate) fn head(m: &DMatrix<f64>, end: usize) -> DMatrix<f64> {
    m.rows(0, end).into_owned()
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn progress(msg: impl AsRef<str>) {
    eprintln!("mmlp: {}", msg.as_ref());
}
