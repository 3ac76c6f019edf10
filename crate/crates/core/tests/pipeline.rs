mod common;

use std::fs;
use std::path::Path;

use common::*;
use xparadigm::pipeline::*;
use xparadigm::Error;

fn files(a: &RunArtifacts) -> Vec<FileEntry> {
    a.files().cloned().collect()
}

fn opts(out: &Path) -> RunOptions {
    RunOptions { out: Some(out.to_path_buf()), ..RunOptions::default() }
}

fn manifests(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut found = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            found.extend(manifests(&p));
        } else if p.file_name().is_some_and(|n| n == "manifest.json") {
            found.push(p);
        }
    }
    found
}

#[test]
fn generation_only_emits_one_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("gen", 0);
    cfg.stages = Some(vec![Stage::GenData]);
    let art = run_config(cfg, &opts(tmp.path())).unwrap();
    assert_eq!(art.executed, [Stage::GenData]);
    assert_eq!(manifests(&art.run_dir).len(), 1);
    assert!(art.run_dir.join("gen-data").join(NATURAL).join("manifest.json").exists());
    art.verify().unwrap();
}

#[test]
fn validation_lists_every_problem() {
    let mut cfg = tiny_config("bad name!", 0);
    cfg.schema_version = 99;
    cfg.test_fraction = 1.5;
    cfg.metrics.as_mut().unwrap().attack = "nope".into();
    cfg.paradigms[0].epochs = 0;
    let Err(Error::Validation(errs)) = cfg.validate() else { panic!("expected a validation error") };
    for field in ["schema_version", "run_name", "test_fraction", "metrics.attack", "paradigms[0]"] {
        assert!(errs.iter().any(|e| e.starts_with(field)), "{field} missing from {errs:?}");
    }
    assert!(tiny_config("ok", 0).validate().is_ok());
    assert!(RunConfig::desk("desk", 0).validate().is_ok());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny_config("rt", 3);
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(RunConfig::from_json(&cfg.to_json().replacen("\"seed\"", "\"sede\"", 1)).is_err());
}

#[test]
fn existing_output_needs_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("twice", 0);
    cfg.stages = Some(vec![Stage::GenData]);
    run_config(cfg.clone(), &opts(tmp.path())).unwrap();
    assert!(matches!(run_config(cfg, &opts(tmp.path())), Err(Error::OutputExists(_))));
}

#[test]
fn empty_run_directory_has_no_reports() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(report(tmp.path()), Err(Error::NoReports(_))));
}

#[test]
fn out_of_order_stage_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let o = RunOptions { only: Some(Stage::Train), ..opts(tmp.path()) };
    assert!(matches!(run_config(tiny_config("early", 0), &o), Err(Error::MissingComponent(_))));
}

#[test]
fn full_run_resumes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config("tiny", 0);
    let first = run_config(cfg.clone(), &opts(tmp.path())).unwrap();
    assert_eq!(first.executed, cfg.enabled_stages());
    assert!(first.skipped.is_empty());
    first.verify().unwrap();

    let resume = RunOptions { resume: true, ..opts(tmp.path()) };
    let again = run_config(cfg.clone(), &resume).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, cfg.enabled_stages());
    assert_eq!(files(&again), files(&first));

    // dropping one downstream stage reruns only that stage
    fs::remove_dir_all(first.run_dir.join("transfer")).unwrap();
    let partial = run_config(cfg.clone(), &resume).unwrap();
    assert_eq!(partial.executed, [Stage::Transfer]);
    assert_eq!(files(&partial), files(&first));

    let tables = report(&first.run_dir).unwrap();
    let names: Vec<&str> = tables.iter().map(|(n, _)| n.as_str()).collect();
    for n in ["table1.csv", "table1.md", "table2b.csv", "table2b.md", "transfer_matrix.md", "ablation.md"] {
        assert!(names.contains(&n), "{n} missing");
    }
    let t1 = &tables.iter().find(|(n, _)| n == "table1.csv").unwrap().1;
    let rows: Vec<&str> = t1.lines().map(|l| l.split([',', ' ']).next().unwrap()).collect();
    assert_eq!(rows, ["Dataset", "robust", "non-robust"]);
    assert_eq!(t1.lines().next().unwrap(), "Dataset,MIM,CL,DM,SL,Cross");
    for (name, body) in &tables {
        assert_eq!(&fs::read_to_string(first.run_dir.join("report").join(name)).unwrap(), body);
    }
}

#[test]
fn changed_config_reruns_downstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("change", 0);
    cfg.stages = Some(vec![Stage::GenData, Stage::Distill]);
    cfg.paradigms.retain(|p| matches!(p.paradigm(), xparadigm::paradigms::Paradigm::Sl | xparadigm::paradigms::Paradigm::Cl));
    cfg.transfer = None;
    cfg.metrics = None;
    run_config(cfg.clone(), &opts(tmp.path())).unwrap();
    cfg.distill[0].spec.iterations = 6;
    let art = run_config(cfg, &RunOptions { resume: true, ..opts(tmp.path()) }).unwrap();
    assert_eq!(art.skipped, [Stage::GenData]);
    assert_eq!(art.executed, [Stage::Distill]);
}

#[test]
fn seed_override_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("s", 0);
    cfg.stages = Some(vec![Stage::GenData]);
    let a = run_config(cfg.clone(), &opts(&tmp.path().join("a"))).unwrap();
    let b = run_config(cfg.clone(), &RunOptions { seed: Some(5), ..opts(&tmp.path().join("b")) }).unwrap();
    let c = run_config(cfg, &opts(&tmp.path().join("c"))).unwrap();
    assert_ne!(files(&a), files(&b));
    assert_eq!(files(&a), files(&c));
}
