mod common;

use clauserec_app::{AppError, Status};
use clauserec_core::eval::{Metrics, Task};
use tempfile::tempdir;

#[test]
fn stages_skip_when_up_to_date() {
    let dir = tempdir().unwrap();
    let p = common::fixture(dir.path(), 80, true);
    assert_eq!(p.ingest().unwrap(), Status::Built);
    assert_eq!(p.ingest().unwrap(), Status::UpToDate);
    assert_eq!(p.build_index().unwrap(), Status::Built);
    assert_eq!(p.build_index().unwrap(), Status::UpToDate);
    let label = "governing laws".to_string();
    assert_eq!(p.train_classifiers().unwrap(), vec![(label.clone(), Status::Built)]);
    assert_eq!(p.train_classifiers().unwrap(), vec![(label.clone(), Status::UpToDate)]);
    assert_eq!(p.train_generators().unwrap(), vec![(label.clone(), Status::Built)]);
    assert_eq!(p.train_generators().unwrap(), vec![(label, Status::UpToDate)]);
    let (first, json) = p.evaluate(None).unwrap();
    assert_eq!(first, Status::Built);
    let (second, again) = p.evaluate(None).unwrap();
    assert_eq!(second, Status::UpToDate);
    assert_eq!(json, again);
    assert_eq!(Status::UpToDate.describe(), "artifact up to date");
}

#[test]
fn report_has_every_method_and_variant() {
    let dir = tempdir().unwrap();
    let p = common::fixture(dir.path(), 80, true);
    p.run_all().unwrap();
    let rows = p.report_rows().unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        [
            "cf",
            "docsim",
            "classifier",
            "retrieval-i",
            "retrieval-ii",
            "generation"
        ]
    );
    for r in &rows {
        assert_eq!(r.clause_type, "governing laws");
        assert_eq!(r.config_fingerprint, p.cfg.fingerprint());
        match (&r.task, &r.metrics) {
            (Task::Relevance, Metrics::Relevance { metrics, counts }) => {
                assert_eq!(
                    counts.total(),
                    p.load_split(&p.load_corpus().unwrap(), "governing laws")
                        .unwrap()
                        .test
                        .len()
                );
                for v in [metrics.precision, metrics.recall, metrics.accuracy, metrics.f1] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
            (Task::Generation, Metrics::Generation { scores, n }) => {
                assert!(*n > 0);
                assert!((0.0..=1.0).contains(&scores.rouge1.f1));
            }
            other => panic!("task and metrics disagree: {other:?}"),
        }
    }
    let table = std::fs::read_to_string(p.art.report_table()).unwrap();
    assert!(table.contains("retrieval-ii"));
}

#[test]
fn missing_upstream_names_the_command() {
    let dir = tempdir().unwrap();
    let p = common::fixture(dir.path(), 40, false);
    let err = p.build_index().unwrap_err();
    assert!(
        matches!(err, AppError::MissingArtifact { command: "ingest", .. }),
        "{err}"
    );
    assert!(err.to_string().contains("run `clauserec ingest` first"), "{err}");

    p.ingest().unwrap();
    let err = p.train_classifiers().unwrap_err();
    assert!(
        matches!(
            err,
            AppError::MissingArtifact {
                command: "build-index",
                ..
            }
        ),
        "{err}"
    );
    let err = p.evaluate(None).unwrap_err();
    assert!(matches!(err, AppError::MissingArtifact { .. }), "{err}");
}

#[test]
fn changed_inputs_are_detected() {
    let dir = tempdir().unwrap();
    let p = common::fixture(dir.path(), 40, false);
    p.ingest().unwrap();
    p.build_index().unwrap();

    let mut reseeded = common::pipeline(dir.path(), p.art.root());
    reseeded.cfg.seed = 8;
    let err = reseeded.build_index().unwrap_err();
    assert!(
        matches!(err, AppError::FingerprintMismatch { command: "ingest", .. }),
        "{err}"
    );
    assert_eq!(reseeded.ingest().unwrap(), Status::Built);
    assert_eq!(reseeded.build_index().unwrap(), Status::Built);

    // A different corpus file invalidates ingest for the original config too.
    common::write_synthetic(dir.path(), 44);
    assert_eq!(p.ingest().unwrap(), Status::Built);
}
