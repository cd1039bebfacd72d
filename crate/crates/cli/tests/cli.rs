use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rangefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rangefuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Shortened copy of a builtin scenario, produced by the binary itself.
fn short_scenario(dir: &Path, name: &str, horizon: u64) -> PathBuf {
    let out = rangefuse(&["scenario", name]);
    assert!(out.status.success());
    let mut v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    v["horizon"] = horizon.into();
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn lists_builtin_scenarios() {
    let out = rangefuse(&["scenario"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["workshop", "workshop_fast_turn", "corridor", "dynamic"] {
        assert!(text.lines().any(|l| l == name), "{text}");
    }
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), "workshop", 200);
    let out_dir = dir.path().join("out");
    let out = rangefuse(&["run", sc.to_str().unwrap(), "--seed", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["map.pgm", "map.yaml", "trajectory.csv", "beacons.csv", "metrics.json", "timing.json"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
}

#[test]
fn export_map_writes_named_map() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), "workshop", 150);
    let out = rangefuse(&["export-map", sc.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--stem", "shop"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("shop.pgm").is_file());
    assert!(dir.path().join("shop.yaml").is_file());
}

#[test]
fn sweep_prints_one_row_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), "workshop", 150);
    let out = rangefuse(&["sweep", sc.to_str().unwrap(), "--gammas", "1e-6,0.65"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "gamma,beacon_err_mean,robot_ate_rmse,timing_mean_ms,error");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1.00000e-6,"));
    assert!(lines[2].starts_with("0.650000,"));
}

#[test]
fn sweep_over_empty_horizon_reports_error_rows() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), "corridor", 0);
    let out = rangefuse(&["sweep", sc.to_str().unwrap(), "--gammas", "0.65,1.0"]);
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with("empty horizon")), "{text}");
}

#[test]
fn malformed_scenario_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "not json").unwrap();
    let out = rangefuse(&["run", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(rangefuse(&["run", "no_such_scenario"]).status.code(), Some(2));
    assert_eq!(rangefuse(&["run", "corridor", "--ablation", "sideways"]).status.code(), Some(2));
}

#[test]
fn degenerate_bootstrap_exits_with_scenario_code() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_scenario(dir.path(), "workshop", 200);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sc).unwrap()).unwrap();
    v["beacons"]["initial"].as_array_mut().unwrap().truncate(1);
    fs::write(&sc, v.to_string()).unwrap();
    let out = rangefuse(&["run", sc.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
