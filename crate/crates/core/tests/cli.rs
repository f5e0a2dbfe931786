use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_solenoid-r2r"))
}

fn stdout_json(out: &std::process::Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_matched_device() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["simulate", "--out-dir"]).arg(dir.path()).output().unwrap();
    let v = stdout_json(&out);
    assert!(v["v_c"].as_f64().unwrap() < 1e-4);
    for f in ["record.csv", "control.csv", "metrics.json", "effective_config.toml"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn simulate_constant_voltage_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[simulate]\nvoltage = 30.0\n").unwrap();
    let out = bin().args(["simulate", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()).output().unwrap();
    let v = stdout_json(&out);
    assert!(v["v_c"].as_f64().unwrap() > 0.1);
    assert!(v["J_im"].is_null());
}

#[test]
fn r2r_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["r2r", "--mode", "dm", "--operations", "12", "--trial", "2", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["trial"], 2);
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);
}

#[test]
fn montecarlo_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["montecarlo", "--trials", "2", "--operations", "8", "--mode", "im", "--no-plots", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert_eq!(v["failures"], 0);
    assert!(dir.path().join("percentiles_im.csv").is_file());
    assert!(!dir.path().join("plots").exists());
}

#[test]
fn reference_dump() {
    let dir = tempfile::tempdir().unwrap();
    stdout_json(&bin().args(["reference", "--out-dir"]).arg(dir.path()).output().unwrap());
    let text = std::fs::read_to_string(dir.path().join("reference.csv")).unwrap();
    assert!(text.lines().count() > 100);
}

#[test]
fn bad_config_reports_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[nonsense]\nx = 1\n").unwrap();
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());
}

#[test]
fn missing_config_file_is_io_error() {
    let out = bin().args(["simulate", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
