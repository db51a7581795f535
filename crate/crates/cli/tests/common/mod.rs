use std::fs;
use std::path::{Path, PathBuf};

pub const PREDICTIONS: &str = r#"{"image_id":"img1","method":"origin","labels":["cat"]}
{"image_id":"img2","method":"origin","labels":["dog"]}
{"image_id":"img3","method":"origin","labels":["cat"]}
{"image_id":"img4","method":"origin","labels":["fox"]}
{"image_id":"img1","method":"blip","labels":["cat"]}
{"image_id":"img2","method":"blip","labels":["dog","fox"]}
{"image_id":"img3","method":"blip","labels":["dog"]}
{"image_id":"img4","method":"blip","labels":["fox"]}
"#;

/// Two methods, four images, labels {cat, dog, fox}; the first
/// `calibration_size` images are the calibration subset.
pub fn write_fixture(dir: &Path, calibration_size: usize) -> PathBuf {
    fs::write(
        dir.join("vocab.json"),
        r#"{"dataset_id":"toy","labels":["cat","dog","fox"]}"#,
    )
    .unwrap();
    fs::write(dir.join("universe.txt"), "img1\nimg2\nimg3\nimg4\n").unwrap();
    fs::write(dir.join("predictions.jsonl"), PREDICTIONS).unwrap();
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::write(dir.join("images").join("img1.png"), b"\x89PNG fake").unwrap();
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
  "image_dir": "images"
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, config).unwrap();
    path
}
