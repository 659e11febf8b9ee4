use std::fs;
use std::process::{Command, Output};

fn cli(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ev-trilevel"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("EV_TRILEVEL_OUT")
        .output()
        .unwrap()
}

#[test]
fn unknown_scenario_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.json"), r#"{"ev_share": 0.5, "trilevel": {"restart": 3}}"#).unwrap();
    let out = cli(&["--scenario", "s.json", "paths"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("trilevel.restart"), "{stderr}");
}

#[test]
fn invalid_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--set", "ev_share=1.5", "paths"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ev_share"));
}

#[test]
fn paths_dump_has_every_class_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--out", "o", "--set", "k_paths=2", "paths"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("o/paths.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "path_id,class,origin,hub,decision,length_km,arcs");
    // 2 origins x 4 hubs x 2 routes, each expanded to g, e0, e1 at hub, e1 later.
    assert_eq!(lines.count(), 2 * 4 * 2 * 4);
}

#[test]
fn out_directory_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ev-trilevel"))
        .args(["--out", "ignored", "paths"])
        .current_dir(dir.path())
        .env("EV_TRILEVEL_OUT", "chosen")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("chosen/paths.csv").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn check_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--out", "o", "check", "--starts", "3"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/check.json")).unwrap()).unwrap();
    assert_eq!(report["power_flow"]["passed"], true);
}

#[test]
fn baseline_run_writes_sweep_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--out", "o", "--set", "ev_share=0.3", "baseline", "--mode", "pc", "--alpha-tilde", "0.03"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.path().join("o/sweep.csv")).unwrap();
    let row = sweep.lines().nth(1).unwrap();
    assert!(row.starts_with("0.03,"), "{row}");
    assert!(row.contains(",lmp_pc,"), "{row}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["seed"], 0);
}
