//! Exact path-dependent Shapley attributions for forest predictions and
//! out-of-sample variable-importance summaries.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;
use crate::forest::{Forest, Tree};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("forest expects {expected} features, got {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("windows overlap or are empty: {0}")]
    BadWindows(String),
    #[error("unknown feature {0:?} in group")]
    UnknownFeature(String),
    #[error("zero in-sample standard deviation for {0:?}")]
    ZeroInSampleStd(String),
    #[error("empty range: {0}")]
    EmptyRange(String),
    #[error("no observations")]
    Empty,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

/// Attributions `values[(t, i)]` with `baseline + sum_i values[(t, i)]`
/// equal to the forest prediction at row `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyMatrix {
    pub dates: Vec<String>,
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let denom = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / denom;
    }
}

fn unwind(path: &mut Vec<PathElement>, i: usize) {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut next = path[l].weight;
    let denom = (l + 1) as f64;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = path[j].weight;
            path[j].weight = next * denom / ((j + 1) as f64 * one);
            next = tmp - path[j].weight * zero * (l - j) as f64 / denom;
        } else {
            path[j].weight = path[j].weight * denom / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], i: usize) -> f64 {
    let l = path.len() - 1;
    let (one, zero) = (path[i].one, path[i].zero);
    let denom = (l + 1) as f64;
    let mut next = path[l].weight;
    let mut total = 0.0;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = next * denom / ((j + 1) as f64 * one);
            total += tmp;
            next = path[j].weight - tmp * zero * (l - j) as f64 / denom;
        } else {
            total += path[j].weight * denom / (zero * (l - j) as f64);
        }
    }
    total
}

struct TreeShap<'a> {
    tree: &'a Tree,
    row: &'a [f64],
    phi: &'a mut [f64],
}

impl TreeShap<'_> {
    fn recurse(&mut self, node: usize, mut path: Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
        extend(&mut path, zero, one, feature);
        let n = &self.tree.nodes()[node];
        let Some(split) = &n.split else {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                if let Some(f) = el.feature {
                    self.phi[f] += w * (el.one - el.zero) * n.value;
                }
            }
            return;
        };
        let (hot, cold) = if self.row[split.feature] <= split.threshold {
            (split.left, split.right)
        } else {
            (split.right, split.left)
        };
        let cover = n.count as f64;
        let nodes = self.tree.nodes();
        let (mut iz, mut io) = (1.0, 1.0);
        if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(split.feature)) {
            iz = path[k].zero;
            io = path[k].one;
            unwind(&mut path, k);
        }
        let hot_frac = nodes[hot].count as f64 / cover;
        let cold_frac = nodes[cold].count as f64 / cover;
        self.recurse(hot, path.clone(), iz * hot_frac, io, Some(split.feature));
        self.recurse(cold, path, iz * cold_frac, 0.0, Some(split.feature));
    }
}

/// Exact Shapley values of one tree at one row under the cover-weighted
/// conditional expectation. The implied baseline is the root value.
pub fn tree_shap_row(tree: &Tree, row: &[f64], n_features: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n_features];
    if !tree.nodes().is_empty() {
        let mut s = TreeShap {
            tree,
            row,
            phi: &mut phi,
        };
        s.recurse(0, Vec::new(), 1.0, 1.0, None);
    }
    phi
}

/// Average of the trees' root values: the expected prediction under each
/// tree's training cover.
pub fn forest_baseline(forest: &Forest) -> f64 {
    let trees = forest.trees();
    trees.iter().map(|t| t.nodes()[0].value).sum::<f64>() / trees.len() as f64
}

pub fn tree_shapley_matrix(forest: &Forest, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = forest.n_features();
    if x.ncols() != k {
        return Err(InterpretError::WidthMismatch {
            expected: k,
            found: x.ncols(),
        });
    }
    let n_trees = forest.trees().len() as f64;
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let mut acc = vec![0.0; k];
            for tree in forest.trees() {
                for (a, p) in acc.iter_mut().zip(tree_shap_row(tree, &row, k)) {
                    *a += p;
                }
            }
            acc.into_iter().map(|v| v / n_trees).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(x.nrows(), k, |r, c| rows[r][c]))
}

pub fn tree_shapley(forest: &Forest, x: &FeatureMatrix) -> Result<ShapleyMatrix> {
    Ok(ShapleyMatrix {
        dates: x.dates().to_vec(),
        names: x.names().to_vec(),
        values: tree_shapley_matrix(forest, x.values())?,
        baseline: forest_baseline(forest),
    })
}

impl ShapleyMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// Largest `|baseline + sum phi - prediction|` over rows.
    pub fn local_accuracy_gap(&self, predictions: &[f64]) -> f64 {
        predictions
            .iter()
            .enumerate()
            .map(|(t, p)| (self.baseline + self.values.row(t).sum() - p).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `range` as a new matrix.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            dates: self.dates[range.clone()].to_vec(),
            names: self.names.clone(),
            values: self.values.rows(range.start, range.len()).into_owned(),
            baseline: self.baseline,
        }
    }

    /// Stacks row blocks from consecutive windows. The baseline is taken
    /// from the first block.
    pub fn concat(parts: &[ShapleyMatrix]) -> Result<Self> {
        let first = parts.first().ok_or(InterpretError::Empty)?;
        let k = first.names.len();
        let total: usize = parts.iter().map(|p| p.n_rows()).sum();
        let mut values = DMatrix::zeros(total, k);
        let mut dates = Vec::with_capacity(total);
        let mut at = 0;
        for p in parts {
            if p.names != first.names {
                return Err(InterpretError::WidthMismatch {
                    expected: k,
                    found: p.names.len(),
                });
            }
            values.rows_mut(at, p.n_rows()).copy_from(&p.values);
            dates.extend(p.dates.iter().cloned());
            at += p.n_rows();
        }
        Ok(Self {
            dates,
            names: first.names.clone(),
            values,
            baseline: first.baseline,
        })
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| InterpretError::UnknownFeature(name.to_owned()))
    }

    /// Date column followed by one column per feature.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["date".to_owned()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.n_rows() {
            let mut rec = vec![self.dates[t].clone()];
            rec.extend(self.values.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Out-of-sample windows: `(end_in_sample, end_next)` covers rows
/// `end_in_sample + 1 ..= end_next`.
fn window_rows(windows: &[(usize, usize)], n_rows: usize) -> Result<Vec<usize>> {
    let mut sorted = windows.to_vec();
    sorted.sort_unstable();
    for (i, &(a, b)) in sorted.iter().enumerate() {
        if b <= a || b >= n_rows {
            return Err(InterpretError::BadWindows(format!("({a}, {b}) with {n_rows} rows")));
        }
        if i > 0 && a < sorted[i - 1].1 {
            return Err(InterpretError::BadWindows(format!("({a}, {b}) overlaps its predecessor")));
        }
    }
    Ok(sorted.iter().flat_map(|&(a, b)| a + 1..=b).collect())
}

/// Sum of `|phi|` over every out-of-sample row of every window.
pub fn vi_oos(shap: &ShapleyMatrix, windows: &[(usize, usize)]) -> Result<Vec<f64>> {
    let rows = window_rows(windows, shap.n_rows())?;
    Ok((0..shap.names.len())
        .map(|i| rows.iter().map(|&t| shap.values[(t, i)].abs()).sum())
        .collect())
}

/// Importance of each group: summed `|phi|` of its member features.
pub fn vi_grouped(
    shap: &ShapleyMatrix,
    groups: &BTreeMap<String, Vec<String>>,
    windows: &[(usize, usize)],
) -> Result<BTreeMap<String, f64>> {
    let rows = window_rows(windows, shap.n_rows())?;
    groups
        .iter()
        .map(|(g, members)| {
            let idx = members.iter().map(|m| shap.index_of(m)).collect::<Result<Vec<_>>>()?;
            let v = rows
                .iter()
                .map(|&t| idx.iter().map(|&i| shap.values[(t, i)].abs()).sum::<f64>())
                .sum();
            Ok((g.clone(), v))
        })
        .collect()
}

/// Trailing moving average; entry `t` uses `series[t + 1 - len ..= t]` and
/// is `None` before a full window exists.
pub fn moving_average(series: &[f64], len: usize) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|t| (t + 1 >= len).then(|| series[t + 1 - len..=t].iter().sum::<f64>() / len as f64))
        .collect()
}

fn sd_over(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `sigma_oos / sigma_ins` of `series`, or of its moving average of length
/// `ma` when given (periods without a full window are skipped).
pub fn std_ratio(name: &str, series: &[f64], ins: Range<usize>, oos: Range<usize>, ma: Option<usize>) -> Result<f64> {
    let base: Vec<Option<f64>> = match ma {
        Some(len) => moving_average(series, len),
        None => series.iter().map(|v| Some(*v)).collect(),
    };
    let pick = |r: &Range<usize>, what: &str| -> Result<Vec<f64>> {
        let v: Vec<f64> = base.get(r.clone()).unwrap_or(&[]).iter().flatten().copied().collect();
        if v.len() < 2 {
            return Err(InterpretError::EmptyRange(format!("{what} range for {name:?}")));
        }
        Ok(v)
    };
    let s_ins = sd_over(&pick(&ins, "in-sample")?);
    let s_oos = sd_over(&pick(&oos, "out-of-sample")?);
    if !(s_ins > 0.0) {
        return Err(InterpretError::ZeroInSampleStd(name.to_owned()));
    }
    Ok(s_oos / s_ins)
}

/// `VI * (sigma_oos / sigma_ins)^-1` per feature.
pub fn vi_adjusted(vi: &[f64], features: &FeatureMatrix, ins: Range<usize>, oos: Range<usize>) -> Result<Vec<f64>> {
    if vi.len() != features.n_features() {
        return Err(InterpretError::WidthMismatch {
            expected: features.n_features(),
            found: vi.len(),
        });
    }
    features
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let col: Vec<f64> = features.values().column(i).iter().copied().collect();
            Ok(vi[i] / std_ratio(name, &col, ins.clone(), oos.clone(), None)?)
        })
        .collect()
}

/// Group version: each group's ratio comes from the moving average (length
/// `ma`) of its underlying indicator series.
pub fn vi_adjusted_grouped(
    vi: &BTreeMap<String, f64>,
    indicators: &BTreeMap<String, Vec<f64>>,
    ins: Range<usize>,
    oos: Range<usize>,
    ma: usize,
) -> Result<BTreeMap<String, f64>> {
    vi.iter()
        .map(|(g, v)| {
            let series = indicators.get(g).ok_or_else(|| InterpretError::UnknownFeature(g.clone()))?;
            Ok((g.clone(), v / std_ratio(g, series, ins.clone(), oos.clone(), Some(ma))?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub date: String,
    pub top: String,
    pub magnitude: f64,
    /// Every attribution at this date is zero; `top` is the first name.
    pub all_zero: bool,
}

/// Per-row feature (or group) with the largest absolute attribution; ties
/// go to the earliest in order.
pub fn top_contributor_timeline(
    shap: &ShapleyMatrix,
    groups: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<Vec<TimelineEntry>> {
    if shap.n_rows() == 0 || shap.names.is_empty() {
        return Err(InterpretError::Empty);
    }
    let units: Vec<(String, Vec<usize>)> = match groups {
        None => shap.names.iter().enumerate().map(|(i, n)| (n.clone(), vec![i])).collect(),
        Some(g) => g
            .iter()
            .map(|(name, members)| {
                Ok((
                    name.clone(),
                    members.iter().map(|m| shap.index_of(m)).collect::<Result<Vec<_>>>()?,
                ))
            })
            .collect::<Result<_>>()?,
    };
    Ok((0..shap.n_rows())
        .map(|t| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (u, (_, idx)) in units.iter().enumerate() {
                let v: f64 = idx.iter().map(|&i| shap.values[(t, i)].abs()).sum();
                if v > best_v {
                    best = u;
                    best_v = v;
                }
            }
            TimelineEntry {
                date: shap.dates[t].clone(),
                top: units[best].0.clone(),
                magnitude: best_v,
                all_zero: best_v == 0.0,
            }
        })
        .collect())
}

pub fn write_timeline_csv(timeline: &[TimelineEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "top", "magnitude", "all_zero"])?;
    for e in timeline {
        w.write_record([e.date.clone(), e.top.clone(), e.magnitude.to_string(), e.all_zero.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
