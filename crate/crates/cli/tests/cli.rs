use std::path::Path;
use std::process::{Command, Output};

fn slqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slqr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn carfollow_is_deterministic_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = slqr(&["carfollow", "--seed", "3", "--out", path(dir.path())]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in [
        "summary.json",
        "oracle.json",
        "scenario.json",
        "onpolicy_min_intervention/convergence.csv",
        "offpolicy_min_intervention/buffer.json",
        "offpolicy_takeover/trajectory.csv",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
    let summary = read_json(&a.path().join("summary.json"));
    assert_eq!(summary["passed"], true);
}

#[test]
fn missing_exploration_reports_collinear_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = slqr(&["offpolicy", "--override", "amplitude=0", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["kind"], "collinear");
}

#[test]
fn takeover_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = slqr(&["takeover", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("iteration,p_change,p_error,condition_number,rows,segments"));
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["relative_error"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn analysis_demonstrations_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["nonuniqueness", "single-trajectory", "distinct-trajectories"] {
        let out = slqr(&["analysis", "--mode", mode, "--out", path(dir.path())]);
        assert_eq!(out.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&out.stdout));
        assert!(dir.path().join(format!("{mode}.json")).exists());
    }
    let out = slqr(&["analysis", "--mode", "bogus", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn care_solves_a_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scalar.json");
    std::fs::write(
        &scenario,
        r#"{
            "schema_version": 1,
            "plant": {"a": [[0.0]], "b": [[1.0]]},
            "human": {"kh": [[-1.0]], "ch": [[1.0]]},
            "weights": {"q": [[1.0]], "m": [[0.0]], "r": [[1.0]], "tau": 0.05},
            "mode": "off_policy_takeover",
            "x0": [1.0]
        }"#,
    )
    .unwrap();
    let out = slqr(&["care", "--scenario", path(&scenario), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let oracle = read_json(&dir.path().join("oracle.json"));
    let p = oracle["takeover"]["p_star"][0][0].as_f64().unwrap();
    let k = oracle["takeover"]["k_star"][0][0].as_f64().unwrap();
    assert!((p - 1.0).abs() < 1e-12);
    assert!((k + 1.0).abs() < 1e-12);
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = slqr(&["onpolicy", "--override", "warp=9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));
    let out = slqr(&["care", "--scenario", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = slqr(&["carfollow", "--scenario", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}
