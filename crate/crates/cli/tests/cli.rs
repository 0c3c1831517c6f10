use std::path::Path;
use std::process::{Command, Output};

fn clonesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonesim")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn column(table: &str, name: &str) -> Vec<f64> {
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn report_value(table: &str, arm: &str, quantity: &str) -> f64 {
    table
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[1] == arm && f[2] == quantity)
        .unwrap_or_else(|| panic!("no {arm}/{quantity}"))[4]
        .parse()
        .unwrap()
}

fn workspace_file(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).to_string_lossy().into_owned()
}

#[test]
fn simulate_starts_from_the_transferred_cells() {
    let table = stdout(&clonesim(&["simulate", "--preset", "experiment1", "--n0", "8.5"]));
    assert!(table.starts_with("time_h,antigen,transferred.N,transferred.T1"));
    assert_eq!(column(&table, "time_h")[0], 0.0);
    assert_eq!(column(&table, "transferred.total")[0], 8.5);
}

#[test]
fn no_antigen_keeps_the_total_fixed() {
    let table = stdout(&clonesim(&["simulate", "--preset", "experiment1", "--n0", "8.5", "--antigen-dose", "0", "--grid", "12"]));
    assert!(column(&table, "transferred.total").iter().all(|&v| v == 8.5));
    assert!(column(&table, "antigen").iter().all(|&v| v == 0.0));
}

#[test]
fn output_is_reproducible() {
    let args = ["simulate", "--preset", "experiment3", "--group", "ii", "--grid", "6"];
    assert_eq!(stdout(&clonesim(&args)), stdout(&clonesim(&args)));
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let args = ["simulate", "--preset", "experiment2", "--group", "iii", "--param", "s=0.0012", "--grid", "6"];
    let dumped = stdout(&clonesim(&[&args[..], &["--dump-config"]].concat()));
    std::fs::write(&cfg, dumped).unwrap();
    let direct = stdout(&clonesim(&args));
    let replay = stdout(&clonesim(&["simulate", "--config", cfg.to_str().unwrap()]));
    assert_eq!(direct, replay);
}

#[test]
fn experiment2_report() {
    let table = stdout(&clonesim(&["report", "experiment2"]));
    assert!(table.starts_with("experiment,arm,quantity,time_h,value"));
    let p: Vec<f64> = ["i", "ii", "iii"].iter().map(|g| report_value(&table, g, "recruitment")).collect();
    assert!((p[0] - 76.157).abs() < 0.01 && (p[1] - 74.170).abs() < 0.01 && (p[2] - 58.314).abs() < 0.01, "{p:?}");
}

#[test]
fn experiment1_report() {
    let table = stdout(&clonesim(&["report", "experiment1"]));
    let day0 = table
        .lines()
        .find(|l| l.contains("fold_difference,0.0000000000000000e0"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!((day0 - 947.0).abs() < 1e-9);
    let slope = table.lines().find(|l| l.contains(",regression_slope,")).unwrap().rsplit(',').next().unwrap().parse::<f64>().unwrap();
    assert!((slope + 6.3).abs() < 0.1, "{slope}");
}

#[test]
fn experiment3_late_arm_is_almost_empty() {
    let table = stdout(&clonesim(&["report", "experiment3"]));
    assert!(report_value(&table, "iii", "recruitment") < 1.0);
}

#[test]
fn feedback_override_flattens_competition() {
    let table = stdout(&clonesim(&["report", "experiment2", "--param", "s=0"]));
    let p: Vec<f64> = ["i", "ii", "iii"].iter().map(|g| report_value(&table, g, "recruitment")).collect();
    assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-9), "{p:?}");
}

#[test]
fn sweep_covers_the_grid() {
    let table = stdout(&clonesim(&["sweep", "--preset", "experiment2", "--grid", "s=0:0.0018:3", "--grid", "r_e=1.4,1.6"]));
    // 3 x 2 parameter points, 3 arms each, one row per observation time.
    let rows = table.lines().count() - 1;
    assert_eq!(rows % 18, 0);
    assert!(rows > 0);
}

#[test]
fn shipped_configs_run() {
    stdout(&clonesim(&["simulate", "--config", &workspace_file("configs/run.toml"), "--grid", "24"]));
    stdout(&clonesim(&["simulate", "--config", &workspace_file("configs/custom.toml"), "--grid", "24"]));
}

#[test]
fn synthesized_data_round_trips_through_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let report = dir.path().join("fit.toml");
    stdout(&clonesim(&["synthesize", "--out", data.to_str().unwrap()]));
    stdout(&clonesim(&["fit", "--data", data.to_str().unwrap(), "--free", "r_e", "--out", report.to_str().unwrap()]));
    let text = std::fs::read_to_string(report).unwrap();
    let parsed: toml::Table = text.parse().unwrap();
    let params = parsed["params"].as_table().unwrap();
    assert!((params["r_e"].as_float().unwrap() / 1.5412 - 1.0).abs() < 1e-6);
    assert_eq!(params["g"].as_float().unwrap(), 0.0994);
    assert_eq!(params["M"].as_integer().unwrap(), 10);
    assert_eq!(parsed["summary"]["converged"].as_bool(), Some(true));
}

#[test]
fn empty_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.csv");
    std::fs::write(&data, "experiment,arm,kind,division,time_h,value,weight\n").unwrap();
    let out = clonesim(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[params]\nr_e = -1.0\n").unwrap();
    assert_eq!(clonesim(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&cfg, "[solver]\nmystery = 1\n").unwrap();
    assert_eq!(clonesim(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(clonesim(&["simulate", "--param", "nonsense=1"]).status.code(), Some(2));
}

#[test]
fn oversized_step_is_a_solver_failure() {
    let out = clonesim(&["simulate", "--preset", "experiment2", "--group", "i", "--step-h", "10"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unconverged_fit_still_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("fit.toml");
    let out = clonesim(&[
        "fit",
        "--data",
        &workspace_file("configs/data.csv"),
        "--free",
        "s",
        "--max-iterations",
        "0",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(std::fs::read_to_string(report).unwrap().contains("converged = false"));
}
