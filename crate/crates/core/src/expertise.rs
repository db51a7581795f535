//! Per-method expertise on the calibration subset.
//!
//! A method's estimated accuracy is its coverage of the ground truth,
//! discounted by how much of the label space it spends on predictions:
//!
//! ```text
//! coverage = Σ_j |pred_j ∩ gt_j| / Σ_j |gt_j|
//! penalty  = 1 − Σ_j |pred_j| / (n · |C|)
//! est_acc  = coverage · penalty
//! ```
//!
//! so a method that predicts every label on every image scores zero no
//! matter how much it covers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::PredictionMatrix;
use crate::label_space::LabelSet;
use crate::voting::GroundTruth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseEstimate {
    pub method: String,
    pub est_acc: f64,
    #[serde(rename = "coverage")]
    pub coverage_term: f64,
    #[serde(rename = "penalty")]
    pub penalty_term: f64,
    pub n: usize,
    pub label_space_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullScore {
    pub dataset_id: String,
    pub value: f64,
    pub methods: Vec<String>,
}

/// Estimated accuracy of one method. `predictions[j]` and
/// `ground_truth[j]` refer to the same calibration image.
pub fn estimate_accuracy<'a>(
    method: &str,
    predictions: impl IntoIterator<Item = &'a LabelSet>,
    ground_truth: &[LabelSet],
    label_space_size: usize,
) -> Result<ExpertiseEstimate> {
    let n = ground_truth.len();
    if n == 0 {
        return Err(Error::InvalidConfig("calibration subset is empty".into()));
    }
    if label_space_size == 0 {
        return Err(Error::InvalidConfig("label space is empty".into()));
    }

    let mut hits = 0usize;
    let mut truth_total = 0usize;
    let mut predicted_total = 0usize;
    let mut seen = 0usize;
    for (pred, gt) in predictions.into_iter().zip(ground_truth) {
        hits += pred.intersection(gt).count();
        truth_total += gt.len();
        predicted_total += pred.len();
        seen += 1;
    }
    if seen != n {
        return Err(Error::InvalidConfig(format!(
            "method {method} has predictions for {seen} of {n} calibration images"
        )));
    }
    if truth_total == 0 {
        return Err(Error::DegenerateGroundTruth);
    }

    let coverage = hits as f64 / truth_total as f64;
    // Only malformed input (more predictions than labels) drives this negative.
    let penalty = (1.0 - predicted_total as f64 / (n * label_space_size) as f64).max(0.0);
    Ok(ExpertiseEstimate {
        method: method.to_string(),
        est_acc: (coverage * penalty).max(0.0),
        coverage_term: coverage,
        penalty_term: penalty,
        n,
        label_space_size,
    })
}

/// Estimates every method of the matrix against the same ground truth.
pub fn estimate_all(
    matrix: &PredictionMatrix,
    ground_truth: &GroundTruth,
    label_space_size: usize,
) -> Result<Vec<ExpertiseEstimate>> {
    let rows: Vec<usize> = ground_truth
        .images
        .iter()
        .map(|id| matrix.require_image(id))
        .collect::<Result<_>>()?;
    matrix
        .methods()
        .iter()
        .enumerate()
        .map(|(m, method)| {
            estimate_accuracy(
                method,
                rows.iter().map(|&image| matrix.labels(image, m)),
                &ground_truth.sets,
                label_space_size,
            )
        })
        .collect()
}

/// Sum of the contributing methods' estimated accuracies: the largest
/// weighted support any label can reach.
pub fn full_score(dataset_id: &str, estimates: &[ExpertiseEstimate]) -> Result<FullScore> {
    if estimates.is_empty() {
        return Err(Error::InvalidConfig("full score needs at least one method".into()));
    }
    let mut seen = BTreeSet::new();
    for e in estimates {
        if !seen.insert(e.method.as_str()) {
            return Err(Error::DuplicateMethod(e.method.clone()));
        }
    }
    Ok(FullScore {
        dataset_id: dataset_id.to_string(),
        value: estimates.iter().map(|e| e.est_acc).sum(),
        methods: estimates.iter().map(|e| e.method.clone()).collect(),
    })
}
