use std::collections::BTreeMap;
use std::fmt::Write as _;

use mmlp_core::metrics::MetricsBundle;

use crate::error::{CliError, Result};
use crate::workspace::{files, RunDir};

use super::backtest::{MetricsFile, TcRow};

const ORDER: [&str; 8] = [
    "mace",
    "mace-pm",
    "ew-rf",
    "ew-pm",
    "minvar-rf",
    "minvar-pm",
    "benchmark-rf",
    "benchmark-pm",
];

fn ordered(strategies: &BTreeMap<String, MetricsBundle>) -> Vec<&String> {
    let mut names: Vec<&String> = strategies.keys().collect();
    names.sort_by_key(|n| (ORDER.iter().position(|o| o == n).unwrap_or(ORDER.len()), n.to_string()));
    names
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Header and one row of cells per strategy.
pub fn metrics_table(m: &MetricsFile) -> (Vec<String>, Vec<Vec<String>>) {
    let slices: Vec<String> = m
        .strategies
        .values()
        .flat_map(|b| b.r2_by_slice.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header: Vec<String> = ["strategy", "r2_oos_pct", "r_ann_pct", "sharpe", "omega", "max_dd_pct"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(slices.iter().map(|s| format!("r2_{s}_pct")));
    let rows = ordered(&m.strategies)
        .into_iter()
        .map(|name| {
            let b = &m.strategies[name];
            let omega = if b.omega_infinite { "inf".to_owned() } else { num(b.omega) };
            let mut row = vec![
                name.clone(),
                pct(b.r2_oos),
                pct(Some(b.r_annualized)),
                num(b.sharpe),
                omega,
                pct(Some(b.max_drawdown)),
            ];
            row.extend(slices.iter().map(|s| pct(b.r2_by_slice.get(s).copied())));
            row
        })
        .collect();
    (header, rows)
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn sweep_table(rows: &[TcRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut costs: Vec<f64> = rows.iter().map(|r| r.cost_multiple).collect();
    costs.sort_by(f64::total_cmp);
    costs.dedup();
    let mut header = vec!["strategy".to_owned()];
    for c in &costs {
        header.push(format!("r_ann_pct@{c}"));
        header.push(format!("sharpe@{c}"));
    }
    let mut by_name: BTreeMap<&str, Vec<&TcRow>> = BTreeMap::new();
    for r in rows {
        by_name.entry(&r.strategy).or_default().push(r);
    }
    let mut names: Vec<&str> = by_name.keys().copied().collect();
    names.sort_by_key(|n| (ORDER.iter().position(|o| o == n).unwrap_or(ORDER.len()), n.to_string()));
    let table = names
        .into_iter()
        .map(|n| {
            let mut row = vec![n.to_owned()];
            for c in &costs {
                let hit = by_name[n].iter().find(|r| r.cost_multiple == *c);
                row.push(pct(hit.map(|r| r.r_annualized)));
                row.push(num(hit.and_then(|r| r.sharpe)));
            }
            row
        })
        .collect();
    (header, table)
}

fn read_sweep(dir: &RunDir) -> Result<Option<Vec<TcRow>>> {
    let path = dir.path(files::TC_SWEEP);
    if !path.exists() {
        return Ok(None);
    }
    let wrap = |e: csv::Error| CliError::io(&path, e.into());
    let mut r = csv::Reader::from_path(&path).map_err(wrap)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<TcRow>, _>>().map_err(wrap)?;
    Ok(Some(rows))
}

/// Renders `metrics.json` (and the cost sweep when present) as a text
/// table and a CSV; returns the text.
pub fn run(dir: &RunDir) -> Result<String> {
    let path = dir.path(files::METRICS);
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let m: MetricsFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let (header, rows) = metrics_table(&m);

    let mut text = String::new();
    let _ = writeln!(
        text,
        "Test window after {} ({} periods, {} estimation window(s)), cost multiple {}",
        m.train_end, m.test_periods, m.refits, m.cost_multiple
    );
    text.push('\n');
    text.push_str(&render(&header, &rows));
    if let Some(sweep) = read_sweep(dir)? {
        let (h, r) = sweep_table(&sweep);
        text.push_str("\nTransaction-cost sweep (net of costs)\n\n");
        text.push_str(&render(&h, &r));
    }
    dir.write(files::REPORT_TEXT, text.as_bytes())?;

    let csv_path = dir.path(files::REPORT_CSV);
    let wrap = |e: csv::Error| CliError::io(&csv_path, e.into());
    let mut w = csv::Writer::from_path(&csv_path).map_err(wrap)?;
    w.write_record(&header).map_err(wrap)?;
    for r in &rows {
        w.write_record(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    dir.write_manifest()?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(r2: Option<f64>, omega_infinite: bool) -> MetricsBundle {
        MetricsBundle {
            r2_oos: r2,
            r2_by_slice: BTreeMap::from([("recession".to_owned(), 0.01)]),
            r_annualized: 0.05,
            sharpe: Some(0.5),
            omega: if omega_infinite { None } else { Some(1.2) },
            omega_infinite,
            omega_threshold: 0.0,
            max_drawdown: 0.1,
            kurtosis: 3.0,
            skewness: 0.0,
            periods_per_year: 12,
            n_periods: 100,
        }
    }

    #[test]
    fn table_orders_strategies_and_formats_cells() {
        let m = MetricsFile {
            train_end: "0099".into(),
            test_periods: 100,
            refits: 1,
            omega_threshold: 0.0,
            cost_multiple: 0.0,
            strategies: BTreeMap::from([
                ("ew-pm".to_owned(), bundle(None, true)),
                ("mace".to_owned(), bundle(Some(0.0405), false)),
                ("zz".to_owned(), bundle(None, false)),
            ]),
        };
        let (header, rows) = metrics_table(&m);
        assert_eq!(header.last().unwrap(), "r2_recession_pct");
        let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(names, ["mace", "ew-pm", "zz"]);
        assert_eq!(rows[0][1], "4.05");
        assert_eq!(rows[1][1], "-");
        assert_eq!(rows[1][4], "inf");
        assert_eq!(rows[0][5], "10.00");
        let text = render(&header, &rows);
        assert_eq!(text.lines().count(), 4);
    }
}
