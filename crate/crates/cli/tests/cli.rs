use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmlp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mmlp(args);
    assert!(
        out.status.success(),
        "mmlp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Demo {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Demo {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--out", root.to_str().unwrap()]);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_owned()
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&read(p)).unwrap()
}

fn csv_rows(p: impl AsRef<Path>) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p.as_ref()).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(str::to_owned).collect()).collect();
    (header, rows)
}

#[test]
fn fit_writes_artifact_history_snapshot_and_manifest() {
    let d = Demo::new();
    let run = d.path("run-a");
    ok(&["fit", "-c", &d.path("demo.toml"), "-o", &run]);
    let run = PathBuf::from(run);
    for f in ["model.json", "history.csv", "config.resolved.toml", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let (header, rows) = csv_rows(run.join("history.csv"));
    assert_eq!(header[..3], ["member", "s", "in_sample_loss"]);
    assert!(!rows.is_empty() && rows.len() <= 15);

    let manifest = json(run.join("manifest.json"));
    let entries = manifest.as_object().unwrap();
    assert_eq!(entries.len(), 3);
    let bytes = read(run.join("model.json"));
    assert_eq!(entries["model.json"]["bytes"].as_u64().unwrap(), bytes.len() as u64);
}

#[test]
fn fit_is_deterministic_and_reruns_from_snapshot() {
    let d = Demo::new();
    let returns_before = read(d.path("returns.csv"));
    ok(&["fit", "-c", &d.path("demo.toml"), "-o", &d.path("a"), "--seed", "11"]);
    ok(&["fit", "-c", &d.path("demo.toml"), "-o", &d.path("b"), "--seed", "11", "--threads", "1"]);
    let a = PathBuf::from(d.path("a"));
    let b = PathBuf::from(d.path("b"));
    assert_eq!(read(a.join("history.csv")), read(b.join("history.csv")));
    assert_eq!(read(a.join("model.json")), read(b.join("model.json")));

    ok(&["fit", "-c", a.join("config.resolved.toml").to_str().unwrap(), "-o", &d.path("c")]);
    assert_eq!(read(a.join("model.json")), read(PathBuf::from(d.path("c")).join("model.json")));
    assert_eq!(read(d.path("returns.csv")), returns_before);
}

#[test]
fn missing_input_reports_path_with_io_exit_code() {
    let d = Demo::new();
    let missing = d.path("absent.csv");
    let out = mmlp(&["fit", "-c", &d.path("demo.toml"), "--set", &format!("data.returns={missing:?}")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let d = Demo::new();
    let out = mmlp(&["fit", "-c", &d.path("demo.toml"), "--set", "mace.not_a_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mmlp(&["fit", "-c", &d.path("demo.toml"), "--set", "schedule.step=0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mmlp(&["backtest", "-c", &d.path("demo.toml"), "-o", &d.path("empty")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn incompatible_artifact_is_rejected() {
    let d = Demo::new();
    ok(&["fit", "-c", &d.path("demo.toml")]);
    let out = mmlp(&["backtest", "-c", &d.path("demo.toml"), "--set", "mace.mode.max_lag=3"]);
    assert_eq!(out.status.code(), Some(6));
    let out = mmlp(&["backtest", "-c", &d.path("demo.toml"), "--set", "schedule.train_fraction=0.6"]);
    assert_eq!(out.status.code(), Some(6));
}

fn zero_values(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if k == "value" {
                    *x = Value::from(0.0);
                } else {
                    zero_values(x);
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(zero_values),
        _ => {}
    }
}

#[test]
fn zero_forecast_model_stays_flat() {
    let d = Demo::new();
    let cfg = d.path("demo.toml");
    ok(&["fit", "-c", &cfg]);
    let run = d.root.join("run");
    let mut model = json(run.join("model.json"));
    zero_values(&mut model["forest"]);
    std::fs::write(run.join("model.json"), serde_json::to_vec(&model).unwrap()).unwrap();
    ok(&["backtest", "-c", &cfg]);

    let (_, rows) = csv_rows(run.join("backtest_mace.csv"));
    assert_eq!(rows.len(), 360);
    for r in &rows {
        for cell in &r[1..] {
            assert_eq!(cell.parse::<f64>().unwrap(), 0.0);
        }
    }
    let m = &json(run.join("metrics.json"))["strategies"]["mace"];
    assert_eq!(m["r_annualized"].as_f64(), Some(0.0));
    assert_eq!(m["max_drawdown"].as_f64(), Some(0.0));
    assert!(m["sharpe"].is_null());
}

#[test]
fn cost_sweep_and_report() {
    let d = Demo::new();
    let cfg = d.path("demo.toml");
    ok(&["fit", "-c", &cfg]);
    ok(&["backtest", "-c", &cfg]);
    let run = d.root.join("run");
    let (_, rows) = csv_rows(run.join("tc_sweep.csv"));
    let mut by: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for r in rows {
        by.entry(r[0].clone()).or_default().push((r[1].parse().unwrap(), r[2].parse().unwrap()));
    }
    assert_eq!(by.len(), 8);
    for (name, mut pts) in by {
        assert_eq!(pts.len(), 3);
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            assert!(w[1].1 <= w[0].1, "{name}: {w:?}");
        }
    }
    let out = ok(&["report", "--run", run.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("mace") && text.contains("r2_oos_pct") && text.contains("sweep"));
    let (header, rows) = csv_rows(run.join("report.csv"));
    assert_eq!(header[0], "strategy");
    assert_eq!(rows[0][0], "mace");
}

#[test]
fn expanding_schedule_refits_every_step() {
    let d = Demo::new();
    let cfg = d.path("demo-exogenous.toml");
    let step = ["--set", "schedule.step=7"];
    ok(&[&["fit", "-c", &cfg][..], &step].concat());
    ok(&[&["backtest", "-c", &cfg][..], &step].concat());
    let m = json(d.root.join("run-exogenous").join("metrics.json"));
    let test = m["test_periods"].as_u64().unwrap();
    assert_eq!(test, 120);
    assert_eq!(m["refits"].as_u64().unwrap(), test.div_ceil(7));
}

#[test]
fn baseline_rows_rerun_and_rank() {
    let d = Demo::new();
    let cfg = d.path("demo.toml");
    ok(&["fit", "-c", &cfg]);
    let four = ["--set", "baseline.n_random=4"];
    ok(&[&["baseline", "-c", &cfg][..], &four].concat());
    let run = d.root.join("run");
    let first = read(run.join("baseline.csv"));
    let (_, rows) = csv_rows(run.join("baseline.csv"));
    assert_eq!(rows.len(), 4 + 8);
    ok(&[&["baseline", "-c", &cfg][..], &four].concat());
    assert_eq!(read(run.join("baseline.csv")), first);

    let s = json(run.join("baseline_summary.json"));
    let model = s["model_oos_r2"].as_f64().unwrap();
    let random: Vec<f64> = rows
        .iter()
        .filter(|r| r[1] == "random")
        .map(|r| r[4].parse().unwrap())
        .collect();
    let below = random.iter().filter(|r| **r < model).count() as f64 / random.len() as f64;
    assert_eq!(s["model_percentile"].as_f64().unwrap(), below);
}

fn shapley_sums(run: &Path, oos_start: &str) -> (Vec<String>, Vec<f64>) {
    let (header, rows) = csv_rows(run.join("shapley.csv"));
    let names = header[1..].to_vec();
    let mut sums = vec![0.0; names.len()];
    for r in rows.iter().filter(|r| r[0].as_str() >= oos_start) {
        for (i, c) in r[1..].iter().enumerate() {
            sums[i] += c.parse::<f64>().unwrap().abs();
        }
    }
    (names, sums)
}

#[test]
fn shapley_single_window_matches_plain_sums() {
    let d = Demo::new();
    let cfg = d.path("demo-exogenous.toml");
    let single = ["--set", "schedule.expanding=false"];
    ok(&[&["fit", "-c", &cfg][..], &single].concat());
    ok(&[&["shapley", "-c", &cfg][..], &single].concat());
    let run = d.root.join("run-exogenous");
    let vi = json(run.join("vi.json"));
    assert_eq!(vi["windows"].as_u64(), Some(1));
    assert!(vi["max_local_accuracy_gap"].as_f64().unwrap() <= 1e-8);

    let (names, sums) = shapley_sums(&run, vi["oos_start"].as_str().unwrap());
    let reported: Vec<f64> = vi["vi"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (a, b) in sums.iter().zip(&reported) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
    for (group, total) in vi["grouped"].as_object().unwrap() {
        let total = total.as_f64().unwrap();
        let best = names
            .iter()
            .zip(&reported)
            .filter(|(n, _)| n.starts_with(&format!("{group}_l")))
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        assert!(total >= best, "{group}");
    }
    let (_, timeline) = csv_rows(run.join("timeline.csv"));
    assert_eq!(timeline.len() as u64, vi["oos_rows"].as_u64().unwrap());
}

#[test]
fn shapley_over_expanding_windows_audits_every_row() {
    let d = Demo::new();
    let cfg = d.path("demo-exogenous.toml");
    ok(&["fit", "-c", &cfg]);
    ok(&["shapley", "-c", &cfg]);
    let vi = json(d.root.join("run-exogenous").join("vi.json"));
    assert_eq!(vi["windows"].as_u64(), Some(3));
    assert_eq!(vi["oos_rows"].as_u64(), Some(120));
    assert!(vi["max_local_accuracy_gap"].as_f64().unwrap() <= 1e-8);
    assert!(vi["adjusted"].is_array());
}
