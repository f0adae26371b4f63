use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mfg-charge");

fn reference_lq() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {report}"))
        .parse()
        .unwrap()
}

#[test]
fn affine_solve_writes_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve",
        reference_lq().to_str().unwrap(),
        "--solver",
        "affine",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("equilibrium.csv"));
    assert_eq!(
        header,
        ["t", "xbar1_kwh", "xbar2_kw", "price", "s1", "s2", "P11", "P12", "P22", "Omega11", "Omega12", "Omega22"]
    );
    assert_eq!(rows.len(), 1601);
    assert_eq!(rows[1600][0], "8");
    assert!(rows.iter().all(|r| !r[9].is_empty()));
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["method"], "affine");
    assert_eq!(diag["nodes"], 1601);
    assert!(report_value(&stdout(&out), "tpbvp_backward") <= 1e-5);
}

#[test]
fn non_affine_solvers_leave_omega_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve",
        reference_lq().to_str().unwrap(),
        "--solver",
        "variational",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (_, rows) = read_csv(&dir.path().join("equilibrium.csv"));
    assert!(rows.iter().all(|r| r[9..].iter().all(String::is_empty)));
}

#[test]
fn forced_non_convergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve",
        reference_lq().to_str().unwrap(),
        "--solver",
        "fixedpoint",
        "--set",
        "solve.max_iter=1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("residual"), "{}", stderr(&out));
}

#[test]
fn negative_slope_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve",
        reference_lq().to_str().unwrap(),
        "--set",
        "price.c1=-1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("with c1>0"), "{}", stderr(&out));
}

#[test]
fn unreadable_or_unknown_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(run(&["solve", missing.to_str().unwrap(), "--out", out_dir]).status.code(), Some(1));
    let out = run(&["solve", reference_lq().to_str().unwrap(), "--set", "grid.steps=3", "--out", out_dir]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_population_and_agent_paths() {
    let dir = tempfile::tempdir().unwrap();
    let agents = dir.path().join("agents.csv");
    let out = run(&[
        "simulate",
        reference_lq().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--agents-csv",
        agents.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("population.csv"));
    assert_eq!(
        header,
        [
            "t",
            "xbar2_emp_kw",
            "xbar2_theory_kw",
            "price_emp",
            "price_theory",
            "soc_q05",
            "soc_q50",
            "soc_q95",
            "pow_q05",
            "pow_q50",
            "pow_q95",
            "baseline_xbar2_kw"
        ]
    );
    assert_eq!(rows.len(), 1601);
    let (header, rows) = read_csv(&agents);
    assert_eq!(header, ["t", "agent_id", "soc_kwh", "power_kw", "ramp_kw_per_h"]);
    assert_eq!(rows.len(), 200 * 1601);
    assert_eq!(rows[1601][1], "1");

    let report = stdout(&out);
    assert!((report_value(&report, "mean_terminal_soc_kwh") - 54.0).abs() <= 1.0, "{report}");
    assert!(report_value(&report, "consistency_gap_kw").is_finite());
}

#[test]
fn plateau_without_tracking_weight() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        reference_lq().to_str().unwrap(),
        "--set",
        "cost.q=[0.0, 0.0]",
        "--set",
        "sim.baseline=false",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(report_value(&stdout(&out), "plateau_statistic") < 0.15, "{}", stdout(&out));
    let (_, rows) = read_csv(&dir.path().join("population.csv"));
    assert!(rows.iter().all(|r| r[11].is_empty()));
}

#[test]
fn quick_verify_passes_and_detects_a_perturbed_offset() {
    let cfg = reference_lq();
    let ok = run(&["verify", cfg.to_str().unwrap(), "--quick"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(!stdout(&ok).contains("scaling"));
    let bad = run(&["verify", cfg.to_str().unwrap(), "--quick", "--perturb-s", "0.1"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("FAIL residual"), "{}", stdout(&bad));
}
