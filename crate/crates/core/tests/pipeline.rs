//! End-to-end runs over small on-disk fixtures.
//!
//! Fixture: labels {cat, dog, fox}; origin says cat, dog, cat, fox for
//! img1..img4; blip says {cat}, {dog, fox}, {dog}, {fox}. With k = 1 the
//! pseudo ground truth is the union per image.

use std::fs;
use std::path::{Path, PathBuf};

use renovate_core::aggregation::Diagnosis;
use renovate_core::pipeline::{
    run, QueueReason, ReviewSession, RunConfig, VerdictSubmission, ERROR_FILE, EXPERTISE_FILE, GROUND_TRUTH_FILE,
    INGEST_REPORT_FILE, MANIFEST_FILE, PREDICTIONS_FILE, REPORT_FILE, SOFT_LABELS_FILE,
};
use renovate_core::Error;

const PREDICTIONS: &str = r#"{"image_id":"img1","method":"origin","labels":["cat"]}
{"image_id":"img2","method":"origin","labels":["dog"]}
{"image_id":"img3","method":"origin","labels":["cat"]}
{"image_id":"img4","method":"origin","labels":["fox"]}
{"image_id":"img1","method":"blip","labels":["cat"]}
{"image_id":"img2","method":"blip","labels":["Dog","fox","dog"]}
{"image_id":"img3","method":"blip","labels":["dog","unicorn"]}
{"image_id":"img4","method":"blip","labels":["fox"]}
"#;

fn write_fixture(dir: &Path, calibration_size: usize) -> PathBuf {
    fs::write(
        dir.join("vocab.json"),
        r#"{"dataset_id":"toy","labels":["cat","dog","fox"]}"#,
    )
    .unwrap();
    fs::write(dir.join("universe.txt"), "img1\nimg2\nimg3\nimg4\n").unwrap();
    fs::write(dir.join("predictions.jsonl"), PREDICTIONS).unwrap();
    let config = format!(
        r#"{{
  "dataset_id": "toy",
  "vocabulary": "vocab.json",
  "universe": "universe.txt",
  "predictions": [{{"path": "predictions.jsonl"}}],
  "calibration_size": {calibration_size},
  "vote_threshold": 1,
  "aggregation": {{"threshold": 0.45, "threshold_mode": "absolute", "top_k": 2}},
  "output_dir": "out",
  "seed": 5
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, config).unwrap();
    path
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

fn est(outcome: &renovate_core::pipeline::Calibrated, method: &str) -> f64 {
    outcome.estimates.iter().find(|e| e.method == method).unwrap().est_acc
}

#[test]
fn smoke_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 4);
    let outcome = run(&config).unwrap();
    let out = dir.path().join("out");
    for name in [
        EXPERTISE_FILE,
        SOFT_LABELS_FILE,
        REPORT_FILE,
        INGEST_REPORT_FILE,
        PREDICTIONS_FILE,
        GROUND_TRUTH_FILE,
        MANIFEST_FILE,
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert!(!out.join(ERROR_FILE).exists());

    // Σ|gt| = 6, |C| = 3, n = 4.
    // origin: 4 hits, 4 predicted → 4/6 · (1 − 4/12) = 4/9.
    // blip:   5 hits, 5 predicted → 5/6 · (1 − 5/12) = 35/72.
    let c = &outcome.calibrated;
    assert!(close(est(c, "origin"), 4.0 / 9.0));
    assert!(close(est(c, "blip"), 35.0 / 72.0));
    assert!(close(c.renovation.report.full_score, 67.0 / 72.0));

    let diagnoses: Vec<Diagnosis> = c.renovation.soft_labels.iter().map(|s| s.diagnosis).collect();
    assert_eq!(
        diagnoses,
        vec![
            Diagnosis::Clean,
            Diagnosis::MissingLabel,
            Diagnosis::NoisyLabel,
            Diagnosis::Clean
        ]
    );
    assert_eq!(c.renovation.report.noisy_label_count, 1);
    assert_eq!(c.renovation.report.missing_label_count, 1);

    let ingest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(INGEST_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(ingest["sources"][0]["rejected_out_of_vocab"], 1);
    assert_eq!(ingest["sources"][0]["duplicates_removed"], 1);

    let soft = fs::read_to_string(out.join(SOFT_LABELS_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(soft.lines().nth(1).unwrap()).unwrap();
    assert_eq!(first["image_id"], "img2");
    assert_eq!(first["original"], "dog");
    assert_eq!(first["diagnosis"], "missing_label");
    assert_eq!(first["labels"][0]["label"], "dog");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let expertise: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(EXPERTISE_FILE)).unwrap()).unwrap();
    let first = &expertise["estimates"][0];
    for key in ["method", "est_acc", "coverage", "penalty"] {
        assert!(first.get(key).is_some(), "{key} missing from expertise report");
    }
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 4);
    let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    run(&config).unwrap();
    let first = read_all(&dir.path().join("out"));
    run(&config).unwrap();
    assert_eq!(first, read_all(&dir.path().join("out")));
}

#[test]
fn missing_prediction_file_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 4);
    fs::remove_file(dir.path().join("predictions.jsonl")).unwrap();
    let err = run(&config).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn late_failure_leaves_error_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_fixture(dir.path(), 4);
    let mut text = PREDICTIONS.to_string();
    text.push_str("{\"image_id\":\"img1\",\"method\":\"blip\",\"labels\":[\"dog\"]}\n");
    fs::write(dir.path().join("predictions.jsonl"), text).unwrap();
    let err = run(&config).unwrap_err();
    assert!(matches!(err, Error::DuplicateCell { .. }));
    let body: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out").join(ERROR_FILE)).unwrap()).unwrap();
    assert_eq!(body["kind"], "duplicate_cell");
    assert!(!dir.path().join("out").join(REPORT_FILE).exists());
}

#[test]
fn toml_config_matches_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let json_path = write_fixture(dir.path(), 4);
    let toml_path = dir.path().join("run.toml");
    fs::write(
        &toml_path,
        r#"
dataset_id = "toy"
vocabulary = "vocab.json"
universe = "universe.txt"
calibration_size = 4
vote_threshold = 1
output_dir = "out"
seed = 5

[[predictions]]
path = "predictions.jsonl"

[aggregation]
threshold = 0.45
threshold_mode = "absolute"
top_k = 2
"#,
    )
    .unwrap();
    assert_eq!(
        RunConfig::load(&json_path).unwrap(),
        RunConfig::load(&toml_path).unwrap()
    );
}

#[test]
fn score_filter_applies_to_scored_methods() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 4);
    fs::write(
        dir.path().join("itm.jsonl"),
        r#"{"image_id":"img1","method":"itm","labels":[],"scores":{"cat":0.9,"dog":0.2,"fox":0.05}}
{"image_id":"img2","method":"itm","labels":[],"scores":{"cat":0.1,"dog":0.6,"fox":0.3}}
"#,
    )
    .unwrap();
    let mut config = RunConfig::load(&dir.path().join("run.json")).unwrap();
    config.predictions.push(renovate_core::pipeline::PredictionSource {
        path: dir.path().join("itm.jsonl"),
        method: Some("itm".into()),
        score_filter: Some(renovate_core::ingestion::ScoreFilterConfig {
            threshold: 0.15,
            top_t: 1,
        }),
        cap: None,
    });
    let prepared = renovate_core::pipeline::prepare(&config).unwrap();
    let m = prepared.matrix.method_index("itm").unwrap();
    let names = |i| prepared.vocab.names(prepared.matrix.labels(i, m));
    assert_eq!(names(0), vec!["cat"]);
    assert_eq!(names(1), vec!["dog"]);
    assert!(names(2).is_empty());
    let itm = prepared.ingest.sources.iter().find(|s| s.path == "itm.jsonl").unwrap();
    assert_eq!(itm.score_filtered, 4);
}

fn submission(image: &str, labels: &[&str], timestamp: Option<&str>) -> VerdictSubmission {
    VerdictSubmission {
        image_id: image.into(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
        reviewer: "tester".into(),
        timestamp: timestamp.map(str::to_string),
    }
}

#[test]
fn calibration_verdict_changes_expertise_on_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 4);
    run(&config_path).unwrap();
    let mut session = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap();
    let log = dir.path().join("out").join("verdicts.jsonl");

    session.submit(submission("img3", &["cat"], None)).unwrap();
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1);
    // Nothing changes before recompute.
    assert!(close(est(session.current(), "origin"), 4.0 / 9.0));

    let summary = session.recompute().unwrap();
    // img3's truth shrinks to {cat}: Σ|gt| = 5.
    // origin: 4/5 · 2/3 = 8/15; blip: 4/5 · 7/12 = 7/15.
    assert!(close(est(session.current(), "origin"), 8.0 / 15.0));
    assert!(close(est(session.current(), "blip"), 7.0 / 15.0));
    assert_eq!(summary.verdicts_applied, 1);
    assert!(summary.estimates.iter().all(|d| d.before != d.after));

    // A rerun of the pipeline replays the same log.
    let rerun = run(&config_path).unwrap();
    assert!(close(est(&rerun.calibrated, "origin"), 8.0 / 15.0));
    assert_eq!(rerun.verdicts_applied, 1);
}

#[test]
fn out_of_vocabulary_verdict_is_rejected_and_not_logged() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 4);
    run(&config_path).unwrap();
    let mut session = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap();
    let err = session.submit(submission("img1", &["unicorn"], None)).unwrap_err();
    assert!(matches!(err, Error::OutOfVocabulary(_)));
    let err = session.submit(submission("img9", &["cat"], None)).unwrap_err();
    assert!(matches!(err, Error::UnknownImage(_)));
    assert!(!dir.path().join("out").join("verdicts.jsonl").exists());
}

#[test]
fn latest_timestamp_wins_between_concurrent_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 4);
    run(&config_path).unwrap();
    let mut session = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap();
    session
        .submit(submission("img2", &["fox"], Some("2024-05-01T12:00:00Z")))
        .unwrap();
    session
        .submit(submission("img2", &["dog"], Some("2024-05-01T11:00:00Z")))
        .unwrap();
    assert_eq!(session.verdicts().len(), 2);
    session.recompute().unwrap();
    assert_eq!(session.item("img2").unwrap().verdict, Some(vec!["fox".to_string()]));
}

#[test]
fn queue_serves_calibration_first_then_flagged_by_margin() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 2);
    run(&config_path).unwrap();
    let mut session = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap();

    let queue = session.queue();
    let ids: Vec<(&str, QueueReason)> = queue.iter().map(|q| (q.image_id.as_str(), q.reason)).collect();
    assert_eq!(
        ids,
        vec![
            ("img1", QueueReason::Calibration),
            ("img2", QueueReason::Calibration),
            ("img3", QueueReason::Flagged),
        ]
    );

    session.submit(submission("img1", &["cat"], None)).unwrap();
    session.submit(submission("img2", &[], None)).unwrap();
    let queue = session.queue();
    assert!(queue.iter().all(|q| q.reason == QueueReason::Flagged));
    assert_eq!(queue.len(), 1);

    session.submit(submission("img3", &["cat"], None)).unwrap();
    assert!(session.queue().is_empty());
    let item = session.item("img3").unwrap();
    assert!(!item.in_calibration);
    assert_eq!(item.image_url, "/images/img3");
}

#[test]
fn review_requires_a_completed_run() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 4);
    let err = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap_err();
    assert_eq!(err.kind(), "invalid_config");
}

#[test]
fn corrupt_verdict_lines_are_skipped_on_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_fixture(dir.path(), 4);
    run(&config_path).unwrap();
    let mut session = ReviewSession::open(RunConfig::load(&config_path).unwrap()).unwrap();
    session.submit(submission("img3", &["cat"], None)).unwrap();
    let log = dir.path().join("out").join("verdicts.jsonl");
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("{\"image_id\": \"img1\", truncated\n");
    fs::write(&log, text).unwrap();
    let summary = session.recompute().unwrap();
    assert_eq!(summary.skipped_log_lines, 1);
    assert_eq!(summary.verdicts_applied, 1);
}
