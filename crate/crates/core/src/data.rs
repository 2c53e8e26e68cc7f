//! Return panels, predictor matrices and the feature builders that feed the
//! forest: lags, MARX moving averages and first differences.
//!
//! Row conventions used throughout the crate:
//!
//! * a [`ReturnsPanel`] row `t` holds the returns realized over period `t`;
//! * a [`FeatureMatrix`] row dated `t` holds information available when the
//!   forecast for a later period is formed;
//! * lag `p` of a series at row `t` is `series[t - p]`, so lag 1 is the most
//!   recent observation strictly before `t`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("line {line}: malformed date {token:?}")]
    MalformedDate { line: usize, token: String },
    #[error("line {line}, column {column:?}: non-numeric cell {value:?}")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}, column {column:?}: missing or non-finite value")]
    MissingCell { line: usize, column: String },
    #[error("line {line}: duplicate date {date:?}")]
    DuplicateDate { line: usize, date: String },
    #[error("line {line}: dates not increasing ({previous:?} then {date:?})")]
    DatesNotIncreasing {
        line: usize,
        previous: String,
        date: String,
    },
    #[error("need at least 2 assets, found {found}")]
    TooFewAssets { found: usize },
    #[error("need at least {needed} periods, found {found}")]
    TooFewPeriods { needed: usize, found: usize },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("no complete rows remain after truncation")]
    NoCompleteRows,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Forecast horizon in periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(h: usize) -> Result<Self> {
        if h == 0 {
            return Err(DataError::InvalidHorizon);
        }
        Ok(Self(h))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self(1)
    }
}

impl TryFrom<usize> for Horizon {
    type Error = DataError;
    fn try_from(h: usize) -> Result<Self> {
        Self::new(h)
    }
}

impl From<Horizon> for usize {
    fn from(h: Horizon) -> usize {
        h.0
    }
}

fn check_dates(dates: &[String]) -> Result<()> {
    for (i, pair) in dates.windows(2).enumerate() {
        match pair[0].cmp(&pair[1]) {
            std::cmp::Ordering::Less => {}
            std::cmp::Ordering::Equal => {
                return Err(DataError::DuplicateDate {
                    line: i + 3,
                    date: pair[1].clone(),
                })
            }
            std::cmp::Ordering::Greater => {
                return Err(DataError::DatesNotIncreasing {
                    line: i + 3,
                    previous: pair[0].clone(),
                    date: pair[1].clone(),
                })
            }
        }
    }
    Ok(())
}

fn check_finite(values: &DMatrix<f64>) -> Result<()> {
    for c in 0..values.ncols() {
        for r in 0..values.nrows() {
            if !values[(r, c)].is_finite() {
                return Err(DataError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// T x N matrix of simple period returns on an ordered date axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsPanel {
    dates: Vec<String>,
    assets: Vec<String>,
    values: DMatrix<f64>,
}

impl ReturnsPanel {
    pub fn new(dates: Vec<String>, assets: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != assets.len() {
            return Err(DataError::Shape(format!(
                "{} dates and {} assets for a {}x{} matrix",
                dates.len(),
                assets.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if assets.len() < 2 {
            return Err(DataError::TooFewAssets {
                found: assets.len(),
            });
        }
        if dates.len() < 2 {
            return Err(DataError::TooFewPeriods {
                needed: 2,
                found: dates.len(),
            });
        }
        check_dates(&dates)?;
        check_finite(&values)?;
        Ok(Self {
            dates,
            assets,
            values,
        })
    }

    /// Panel with synthetic `0..T` date tokens, zero padded so that they sort.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let dates = index_dates(values.nrows());
        let assets = (0..values.ncols()).map(|j| format!("a{j}")).collect();
        Self::new(dates, assets, values)
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_periods(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `range` as a new panel.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.n_periods() || range.start >= range.end {
            return Err(DataError::Shape(format!(
                "row range {range:?} outside 0..{}",
                self.n_periods()
            )));
        }
        let values = self
            .values
            .rows(range.start, range.end - range.start)
            .into_owned();
        Self::new(
            self.dates[range].to_vec(),
            self.assets.clone(),
            values,
        )
    }

    /// Portfolio return series `R w`.
    pub fn portfolio(&self, weights: &[f64]) -> Vec<f64> {
        portfolio_returns(&self.values, weights)
    }

    pub fn position_of(&self, date: &str) -> Option<usize> {
        self.dates.binary_search_by(|d| d.as_str().cmp(date)).ok()
    }
}

pub(crate) fn index_dates(n: usize) -> Vec<String> {
    let width = n.max(1).to_string().len();
    (0..n).map(|i| format!("{i:0width$}")).collect()
}

/// `R w` for a T x N matrix.
pub fn portfolio_returns(values: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.ncols(), weights.len(), "weight length mismatch");
    (0..values.nrows())
        .map(|t| {
            weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[(t, j)])
                .sum()
        })
        .collect()
}

/// T x K predictor matrix on a date axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dates: Vec<String>,
    names: Vec<String>,
    values: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(dates: Vec<String>, names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != names.len() {
            return Err(DataError::Shape(format!(
                "{} dates and {} names for a {}x{} matrix",
                dates.len(),
                names.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        check_dates(&dates)?;
        check_finite(&values)?;
        Ok(Self {
            dates,
            names,
            values,
        })
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.values.column(j).iter().copied().collect())
    }
}

/// Lagged copies of `series`: column `p` (0-based) at output row `i` holds
/// `series[t - gap - p]` where `t = i + gap + max_lag - 1` is the row's
/// position in `series`. `gap = 1` gives ordinary lags 1..=max_lag.
pub fn lag_matrix(series: &[f64], max_lag: usize, gap: usize) -> Result<DMatrix<f64>> {
    if max_lag == 0 || gap == 0 {
        return Err(DataError::Shape("max_lag and gap must be positive".into()));
    }
    let skip = gap + max_lag - 1;
    if series.len() <= skip {
        return Err(DataError::TooFewPeriods {
            needed: skip + 1,
            found: series.len(),
        });
    }
    let rows = series.len() - skip;
    Ok(DMatrix::from_fn(rows, max_lag, |i, p| {
        let t = i + skip;
        series[t - gap - p]
    }))
}

/// Lags 1..=max_lag of a dated series; the date axis keeps the last
/// `T - max_lag` dates.
pub fn build_lags(dates: &[String], series: &[f64], max_lag: usize) -> Result<FeatureMatrix> {
    if dates.len() != series.len() {
        return Err(DataError::Shape("dates and series differ in length".into()));
    }
    let values = lag_matrix(series, max_lag, 1)?;
    FeatureMatrix::new(
        dates[max_lag..].to_vec(),
        (1..=max_lag).map(|p| format!("lag_{p}")).collect(),
        values,
    )
}

/// Moving averages of increasing length over lag columns ordered lag 1..P:
/// output column `p` is the mean of input columns `0..=p`.
pub fn marx(lags: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(lags.nrows(), lags.ncols());
    for i in 0..lags.nrows() {
        let mut acc = 0.0;
        for p in 0..lags.ncols() {
            acc += lags[(i, p)];
            out[(i, p)] = acc / (p + 1) as f64;
        }
    }
    out
}

/// Inverse of [`marx`]: recovers the lag columns from the moving averages.
pub fn marx_inverse(averages: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(averages.nrows(), averages.ncols(), |i, p| {
        if p == 0 {
            averages[(i, 0)]
        } else {
            (p + 1) as f64 * averages[(i, p)] - p as f64 * averages[(i, p - 1)]
        }
    })
}

pub fn marx_transform(lags: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix {
        dates: lags.dates.clone(),
        names: (1..=lags.n_features()).map(|p| format!("marx_{p}")).collect(),
        values: marx(&lags.values),
    }
}

pub fn first_difference(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(DataError::TooFewPeriods {
            needed: 2,
            found: series.len(),
        });
    }
    Ok(series.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Differences the named columns of a feature matrix (first row dropped).
pub fn difference_columns(features: &FeatureMatrix, columns: &[String]) -> Result<FeatureMatrix> {
    for c in columns {
        if !features.names.contains(c) {
            return Err(DataError::UnknownColumn(c.clone()));
        }
    }
    let t = features.n_rows();
    if t < 2 {
        return Err(DataError::TooFewPeriods { needed: 2, found: t });
    }
    let mut values = DMatrix::zeros(t - 1, features.n_features());
    for (j, name) in features.names.iter().enumerate() {
        let col: Vec<f64> = features.values.column(j).iter().copied().collect();
        if columns.contains(name) {
            for (i, d) in first_difference(&col)?.into_iter().enumerate() {
                values[(i, j)] = d;
            }
        } else {
            for i in 0..t - 1 {
                values[(i, j)] = col[i + 1];
            }
        }
    }
    FeatureMatrix::new(features.dates[1..].to_vec(), features.names.clone(), values)
}

/// Current value plus `n_lags - 1` lags of every column, named `{col}_l{k}`.
pub fn stack_lags(features: &FeatureMatrix, n_lags: usize) -> Result<FeatureMatrix> {
    if n_lags == 0 {
        return Err(DataError::Shape("n_lags must be positive".into()));
    }
    let t = features.n_rows();
    if t < n_lags {
        return Err(DataError::TooFewPeriods {
            needed: n_lags,
            found: t,
        });
    }
    let rows = t - (n_lags - 1);
    let k = features.n_features();
    let mut names = Vec::with_capacity(k * n_lags);
    for name in &features.names {
        for l in 0..n_lags {
            names.push(format!("{name}_l{l}"));
        }
    }
    let values = DMatrix::from_fn(rows, k * n_lags, |i, c| {
        let (j, l) = (c / n_lags, c % n_lags);
        features.values[(i + n_lags - 1 - l, j)]
    });
    FeatureMatrix::new(features.dates[n_lags - 1..].to_vec(), names, values)
}

/// Predictors at `t` paired with returns at `t + h`.
#[derive(Debug, Clone)]
pub struct AlignedSample {
    pub features: FeatureMatrix,
    pub returns: ReturnsPanel,
}

/// Pairs feature row dated `t` with the panel row `h` periods after `t`.
/// Feature dates must form a contiguous run of the panel's dates.
pub fn pair_with_horizon(
    panel: &ReturnsPanel,
    features: &FeatureMatrix,
    h: Horizon,
) -> Result<AlignedSample> {
    let first = features
        .dates
        .first()
        .ok_or(DataError::TooFewPeriods { needed: 1, found: 0 })?;
    let start = panel
        .position_of(first)
        .ok_or_else(|| DataError::Shape(format!("feature date {first:?} not in panel")))?;
    for (i, d) in features.dates.iter().enumerate() {
        if panel.dates.get(start + i) != Some(d) {
            return Err(DataError::Shape(format!(
                "feature date {d:?} does not follow the panel's date axis"
            )));
        }
    }
    let h = h.get();
    let available = panel.n_periods().saturating_sub(start + h);
    let rows = available.min(features.n_rows());
    if rows < 2 {
        return Err(DataError::TooFewPeriods {
            needed: 2,
            found: rows,
        });
    }
    let features = FeatureMatrix::new(
        features.dates[..rows].to_vec(),
        features.names.clone(),
        features.values.rows(0, rows).into_owned(),
    )?;
    let returns = panel.slice_rows(start + h..start + h + rows)?;
    Ok(AlignedSample { features, returns })
}

/// What to do with rows holding a missing or non-finite cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    /// Keep only the rows after the last incomplete one.
    TruncateToCompleteSuffix,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestOptions {
    #[serde(default)]
    pub missing: MissingPolicy,
    /// Columns pulled out of the asset set (benchmark index, risk-free rate).
    #[serde(default)]
    pub side_columns: Vec<String>,
    /// Side column subtracted from every asset when `subtract_risk_free`.
    #[serde(default)]
    pub risk_free_column: Option<String>,
    #[serde(default)]
    pub subtract_risk_free: bool,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// 1-based file lines dropped by truncation.
    pub dropped_lines: Vec<usize>,
    pub side_columns: BTreeMap<String, Vec<f64>>,
}

/// Raw dated numeric table.
#[derive(Debug, Clone)]
pub struct Table {
    pub dates: Vec<String>,
    pub columns: Vec<String>,
    pub values: DMatrix<f64>,
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "NAN" | "null")
}

/// Reads a `date,col1,col2,...` CSV with a header row.
pub fn read_table(path: &Path, missing: MissingPolicy) -> Result<(Table, Vec<usize>)> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: display.clone(),
            message: e.to_string(),
        })?
        .clone();
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut incomplete: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::Csv {
            path: display.clone(),
            message: e.to_string(),
        })?;
        let date = record.get(0).unwrap_or("");
        if date.is_empty() || date.chars().any(char::is_whitespace) {
            return Err(DataError::MalformedDate {
                line,
                token: date.to_owned(),
            });
        }
        let mut row = Vec::with_capacity(columns.len());
        let mut complete = true;
        for (j, column) in columns.iter().enumerate() {
            let cell = record.get(j + 1).unwrap_or("");
            let value = if is_missing_token(cell) {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| DataError::NonNumeric {
                    line,
                    column: column.clone(),
                    value: cell.to_owned(),
                })?
            };
            if !value.is_finite() {
                if missing == MissingPolicy::Reject {
                    return Err(DataError::MissingCell {
                        line,
                        column: column.clone(),
                    });
                }
                complete = false;
            }
            row.push(value);
        }
        if !complete {
            incomplete.push(rows.len());
        }
        dates.push(date.to_owned());
        rows.push(row);
    }
    check_dates(&dates)?;

    let mut dropped = Vec::new();
    if let Some(&last_bad) = incomplete.last() {
        let keep_from = last_bad + 1;
        if keep_from >= rows.len() {
            return Err(DataError::NoCompleteRows);
        }
        dropped = (0..keep_from).map(|r| r + 2).collect();
        dates.drain(..keep_from);
        rows.drain(..keep_from);
    }
    let values = DMatrix::from_fn(rows.len(), columns.len(), |r, c| rows[r][c]);
    Ok((
        Table {
            dates,
            columns,
            values,
        },
        dropped,
    ))
}

/// Reads a return panel CSV, pulling out side columns and optionally
/// subtracting the risk-free column from every asset.
pub fn load_returns_csv(path: &Path, options: &IngestOptions) -> Result<(ReturnsPanel, IngestReport)> {
    let (table, dropped) = read_table(path, options.missing)?;
    let mut side = options.side_columns.clone();
    if let Some(rf) = &options.risk_free_column {
        if !side.contains(rf) {
            side.push(rf.clone());
        }
    }
    for c in &side {
        if !table.columns.contains(c) {
            return Err(DataError::UnknownColumn(c.clone()));
        }
    }
    let mut report = IngestReport {
        dropped_lines: dropped,
        ..Default::default()
    };
    let mut asset_idx = Vec::new();
    for (j, name) in table.columns.iter().enumerate() {
        let col: Vec<f64> = table.values.column(j).iter().copied().collect();
        if side.contains(name) {
            report.side_columns.insert(name.clone(), col);
        } else {
            asset_idx.push(j);
        }
    }
    let rf = match (&options.risk_free_column, options.subtract_risk_free) {
        (Some(c), true) => report.side_columns.get(c).cloned(),
        _ => None,
    };
    let values = DMatrix::from_fn(table.values.nrows(), asset_idx.len(), |r, c| {
        let v = table.values[(r, asset_idx[c])];
        match &rf {
            Some(rf) => v - rf[r],
            None => v,
        }
    });
    let assets = asset_idx.iter().map(|&j| table.columns[j].clone()).collect();
    let panel = ReturnsPanel::new(table.dates, assets, values)?;
    Ok((panel, report))
}

pub fn load_features_csv(path: &Path, missing: MissingPolicy) -> Result<FeatureMatrix> {
    let (table, _) = read_table(path, missing)?;
    FeatureMatrix::new(table.dates, table.columns, table.values)
}

/// Writes a dated matrix in the same CSV layout the loaders read.
pub fn write_table(
    path: &Path,
    dates: &[String],
    columns: &[String],
    values: &DMatrix<f64>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_owned()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (i, d) in dates.iter().enumerate() {
        let mut rec = vec![d.clone()];
        rec.extend((0..values.ncols()).map(|j| values[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()
}
