use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
}

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(format!("{name}.json"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("slowfast-cli-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn catalog_lists_four_models() {
    let o = run(&["catalog"]);
    assert_eq!(code(&o), 0);
    let names: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(names, ["tradeoff", "switching", "coevolution", "planar"]);
}

#[test]
fn exported_configs_match_the_shipped_files() {
    for name in ["tradeoff", "switching", "coevolution", "planar"] {
        let out = scratch(&format!("{name}.json"));
        let o = run(&["catalog", "--export", name, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(fs::read(&out).unwrap(), fs::read(model(name)).unwrap(), "{name}");
    }
}

#[test]
fn export_defaults_to_name_dot_json() {
    let dir = scratch("cwd");
    fs::create_dir_all(&dir).unwrap();
    let o = bin()
        .args(["catalog", "--export", "planar"])
        .current_dir(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.join("planar.json").exists());
}

#[test]
fn unknown_model_exits_1() {
    let o = run(&["catalog", "--export", "lotka"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown model"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["analyze"])), 1);
    assert_eq!(code(&run(&["analyze", "/nonexistent/config.json"])), 1);
}

#[test]
fn missing_legs_names_the_pointer() {
    let mut cfg: Value = serde_json::from_slice(&fs::read(model("tradeoff")).unwrap()).unwrap();
    cfg["chain"].as_object_mut().unwrap().remove("legs");
    let path = scratch("broken.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = run(&["analyze", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/chain/legs"), "{}", stderr(&o));
}

#[test]
fn analyze_tradeoff_reports_a_stable_orbit() {
    let o = run(&["analyze", model("tradeoff").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["classification"], "stable");
    let legs = r["orbit"]["legs"].as_array().unwrap();
    assert_eq!(legs.len(), 2);
    for key in ["A", "B", "tau", "zeta"] {
        assert!(!legs[0][key].is_null(), "{key}");
    }
    let jac = r["jacobians"].as_array().unwrap();
    assert_eq!(jac[0]["DQ"].as_array().unwrap().len(), 2);
    assert_eq!(r["eigenvalues"].as_array().unwrap().len(), 2);
    assert!(r["spectral_radius"].as_f64().unwrap() < 1.0);
    let checks = r["assumption_report"]["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn analyze_is_deterministic() {
    for name in ["tradeoff", "coevolution"] {
        let a = run(&["analyze", model(name).to_str().unwrap()]);
        let b = run(&["analyze", model(name).to_str().unwrap()]);
        assert_eq!(code(&a), 0);
        assert_eq!(a.stdout, b.stdout, "{name}");
    }
}

#[test]
fn analyze_writes_to_a_file() {
    let out = scratch("planar-report.json");
    let o = run(&["analyze", model("planar").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let r: Value = serde_json::from_slice(&fs::read(out).unwrap()).unwrap();
    assert_eq!(r["classification"], "stable");
}

#[test]
fn assumption_failure_exits_2() {
    // Reversed fast dynamics: the face z = 0 attracts from the start, so no
    // leg ever exits.
    let mut cfg: Value = serde_json::from_slice(&fs::read(model("planar")).unwrap()).unwrap();
    cfg["g"][0] = Value::from("-b*(a + kb*b)");
    let path = scratch("no-exit.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = run(&["analyze", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn simulate_writes_csv_to_stdout() {
    let o = run(&[
        "simulate",
        model("tradeoff").to_str().unwrap(),
        "--eps",
        "0.1",
        "--init",
        "10,0.5,0.5",
        "--tmax",
        "20",
        "--out",
        "-",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau,x,y,al"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(first, [0.0, 10.0, 0.5, 0.5]);
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    assert!((last[0] - 20.0).abs() < 1e-9);
    for field in text.lines().nth(2).unwrap().split(',') {
        let mantissa = field.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{field}");
    }
}

#[test]
fn simulate_rejects_zero_eps() {
    let o = run(&["simulate", model("tradeoff").to_str().unwrap(), "--eps", "0", "--init", "10,0.5,0.5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("positive"));
}

#[test]
fn simulate_rejects_wrong_init_length() {
    let o = run(&["simulate", model("tradeoff").to_str().unwrap(), "--eps", "0.1", "--init", "10,0.5"]);
    assert_eq!(code(&o), 1);
}

fn verify_rows(name: &str, eps: &str) -> Vec<Vec<f64>> {
    let o = run(&["verify", model(name).to_str().unwrap(), "--eps-list", eps]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("eps,hausdorff_distance,cycle_period"));
    lines
        .map(|l| l.split(',').map(|s| s.parse().unwrap()).collect())
        .collect()
}

#[test]
fn verify_tradeoff_distances_decrease() {
    let rows = verify_rows("tradeoff", "0.2,0.1,0.05");
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]), "{rows:?}");
}

#[test]
fn verify_coevolution_distances_decrease() {
    let rows = verify_rows("coevolution", "0.25,0.10");
    assert_eq!(rows.len(), 2);
    assert!(rows[1][1] < rows[0][1], "{rows:?}");
}

#[test]
fn verify_accepts_a_single_eps() {
    let rows = verify_rows("tradeoff", "0.1");
    assert_eq!(rows.len(), 1);
    assert!(rows[0][2] > 0.0);
}

#[test]
fn verify_rejects_ascending_eps() {
    let o = run(&["verify", model("tradeoff").to_str().unwrap(), "--eps-list", "0.05,0.1"]);
    assert_eq!(code(&o), 1);
}
