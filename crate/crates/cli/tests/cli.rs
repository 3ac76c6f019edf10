use std::path::Path;
use std::process::{Command, Output};

use xparadigm::data::PlantedSpec;
use xparadigm::pipeline::{DatasetSource, RunConfig, OUT_ENV};

fn xparadigm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xparadigm")).args(args).env(OUT_ENV, out).output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk("cli", 0);
    cfg.dataset = DatasetSource::Planted(PlantedSpec { n_per_class: 10, ..PlantedSpec::desk(0) });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn init_config_prints_a_valid_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xparadigm(&["init-config", "--run-name", "mine", "--seed", "4"], tmp.path());
    assert!(o.status.success());
    let cfg = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!((cfg.run_name.as_str(), cfg.seed), ("mine", 4));
    cfg.validate().unwrap();
}

#[test]
fn gen_data_writes_under_the_env_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = xparadigm(&["gen-data", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("cli/gen-data/natural/manifest.json").exists());
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), out.join("cli").display().to_string());

    let again = xparadigm(&["run", "--config", cfg.to_str().unwrap(), "--stage", "gen-data"], &out);
    assert!(!again.status.success());
    let resumed = xparadigm(&["run", "--config", cfg.to_str().unwrap(), "--stage", "gen-data", "--resume"], &out);
    assert!(resumed.status.success());
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("gen-data: up to date"));
}

#[test]
fn bad_config_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, RunConfig::desk("cli", 0).to_json().replace("\"test_fraction\": 0.2", "\"test_fraction\": 2.0")).unwrap();
    let o = xparadigm(&["gen-data", "--config", p.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("test_fraction"), "{err}");

    let missing = xparadigm(&["gen-data", "--config", "/nonexistent/config.json"], tmp.path());
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xparadigm(&["report", "--run-dir", tmp.path().to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn unknown_stage_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xparadigm(&["run", "--config", "x.json", "--stage", "bake"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown stage"));
}
