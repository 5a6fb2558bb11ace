use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn thermogrid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermogrid"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn budget_prints_array_totals() {
    let d = tempfile::tempdir().unwrap();
    let o = thermogrid(&["budget"], d.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("Q_max array             24.49 W"), "{s}");
    assert!(s.contains("coolant delta T         2.60 K"), "{s}");
}

#[test]
fn exit_codes_distinguish_usage_and_validation() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(thermogrid(&["--bogus"], d.path()).status.code(), Some(2));
    let o = thermogrid(&["simulate", "--step", "40"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step"));
    let o = thermogrid(&["export-csv", "missing.jsonl"], d.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(d.path().join("bad.json"), "{\"seed\": \"x\"}").unwrap();
    assert_eq!(thermogrid(&["--config", "bad.json", "run"], d.path()).status.code(), Some(2));
}

#[test]
fn simulate_writes_a_trace() {
    let d = tempfile::tempdir().unwrap();
    let o = thermogrid(
        &["simulate", "--step", "8", "--mode", "cool", "--duration", "4", "--out", "cool.csv"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("rise time"));
    let csv = std::fs::read_to_string(d.path().join("cool.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 + 3 * 9);
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 401);
    assert_eq!(rows[0][1], 30.0);
    assert_eq!(rows[1][1], 22.0);
    let last = rows.last().unwrap();
    for cold in &last[2..11] {
        assert!((cold - 22.0).abs() < 0.3, "cell settles at {cold}");
    }
}

#[test]
fn staircase_reports_estimate_and_oracle() {
    let d = tempfile::tempdir().unwrap();
    let o = thermogrid(&["--seed", "3", "staircase", "--runs", "20", "--observer", "mu=2.5,sigma=0.8"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["finished"], 20);
    let oracle = r["observer_delta_at_equilibrium_c"].as_f64().unwrap();
    assert!((oracle - 2.95).abs() < 0.01, "{oracle}");
    let mean = r["mean_jnd_c"].as_f64().unwrap();
    assert!((mean - oracle).abs() < 0.6, "{mean} vs {oracle}");
    let again = thermogrid(&["--seed", "3", "staircase", "--runs", "20", "--observer", "mu=2.5,sigma=0.8"], d.path());
    assert_eq!(stdout(&o), stdout(&again));
}

#[test]
fn patterns_list_show_play() {
    let d = tempfile::tempdir().unwrap();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../patterns");
    let dir = dir.to_str().unwrap();
    let o = thermogrid(&["patterns", "list", "--dir", dir], d.path());
    assert!(o.status.success());
    let list = stdout(&o);
    assert!(list.contains("brush"), "{list}");
    assert!(list.lines().any(|l| l.starts_with("line ")));

    let o = thermogrid(&["patterns", "show", "middle_column", "--dir", dir], d.path());
    assert!(stdout(&o).contains(" . # .\n . # .\n . # .\n"), "{}", stdout(&o));

    let o = thermogrid(
        &[
            "patterns",
            "play",
            "all",
            "--offset",
            "-5",
            "--duration",
            "1",
            "--out",
            "all.csv",
            "--dir",
            dir,
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("all.csv")).unwrap();
    let mid: Vec<f64> = csv.lines().nth(50).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(mid[1..10].iter().all(|&v| v == 25.0), "{mid:?}");

    assert_eq!(thermogrid(&["patterns", "show", "spiral", "--dir", dir], d.path()).status.code(), Some(2));
}

#[test]
fn run_then_export() {
    let d = tempfile::tempdir().unwrap();
    let o = thermogrid(&["--seed", "9", "run", "--out", "s"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("s/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["seed"], 9);
    for exp in ["exp1", "exp2", "exp3", "exp4"] {
        assert!(summary["experiments"].get(exp).is_some(), "{exp} missing");
    }
    let o = thermogrid(&["export-csv", "s/trials.jsonl", "--out", "trials.csv"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("trials.csv")).unwrap();
    let trials = std::fs::read_to_string(d.path().join("s/trials.jsonl")).unwrap();
    assert_eq!(csv.lines().count(), trials.lines().count() + 1);
}
