mod common;

use std::path::Path;
use std::process::{Command, Output};

use clauserec_app::PipelineConfig;
use tempfile::tempdir;

fn clauserec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clauserec"))
        .current_dir(dir)
        .env("CLAUSEREC_ARTIFACTS", dir.join("artifacts"))
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_twice_reports_up_to_date() {
    let dir = tempdir().unwrap();
    common::fixture(dir.path(), 60, false);
    let first = clauserec(dir.path(), &["run"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let out = stdout(&first);
    assert!(out.contains("ingest: built"), "{out}");
    assert!(out.contains("classifier"), "{out}");

    let second = clauserec(dir.path(), &["run"]);
    assert!(second.status.success(), "{}", stderr(&second));
    let out = stdout(&second);
    for stage in ["ingest", "build-index", "train-classifier [governing laws]", "evaluate"] {
        assert!(out.contains(&format!("{stage}: artifact up to date")), "{out}");
    }
}

#[test]
fn missing_stage_names_the_command() {
    let dir = tempdir().unwrap();
    common::fixture(dir.path(), 40, false);
    let o = clauserec(dir.path(), &["train-classifier"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("clauserec ingest"), "{}", stderr(&o));

    assert!(clauserec(dir.path(), &["ingest"]).status.success());
    let o = clauserec(dir.path(), &["evaluate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("clauserec build-index"), "{}", stderr(&o));
}

#[test]
fn method_and_target_flags_restrict_the_run() {
    let dir = tempdir().unwrap();
    common::fixture(dir.path(), 60, false);
    let o = clauserec(dir.path(), &["--method", "cf", "--method", "docsim", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("train-classifier"), "{out}");
    assert!(out.contains(" cf ") && out.contains("docsim"), "{out}");

    let o = clauserec(dir.path(), &["--target", "warranties", "ingest"]);
    assert!(!o.status.success());
}

#[test]
fn recommend_prints_ranked_clauses() {
    let dir = tempdir().unwrap();
    common::fixture(dir.path(), 60, false);
    assert!(clauserec(dir.path(), &["run"]).status.success());
    let contract = r#"{"id": "draft", "clauses": [
        {"label": "Notices", "text": "All notices between the employee and the employer regarding salary shall be in writing."},
        {"label": "Counterparts", "text": "This agreement may be executed in counterparts by the employee and the employer."}
    ]}"#;
    std::fs::write(dir.path().join("draft.json"), contract).unwrap();
    let o = clauserec(dir.path(), &["recommend", "--contract", "draft.json", "--top-n", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("retrieved (governing laws, variant ii)"), "{out}");
    assert!(
        out.contains("  1. ") && out.contains("  3. ") && !out.contains("  4. "),
        "{out}"
    );
    assert!(out.contains("generated: no generator"), "{out}");
}

#[test]
fn synth_and_default_config() {
    let dir = tempdir().unwrap();
    let o = clauserec(dir.path(), &["synth", "--out", "s.jsonl", "--contracts", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("s.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    let o = clauserec(dir.path(), &["default-config", "--corpus", "s.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = PipelineConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg.targets.len(), 5);
    assert!(cfg.target("governing laws").is_some());
}
