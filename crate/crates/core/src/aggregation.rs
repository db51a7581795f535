//! Expertise-weighted aggregation into soft labels.
//!
//! For every image, each label's support is the sum of the weights of the
//! methods that predicted it. Labels are kept when their support reaches
//! the cutoff and they rank in the top K; the kept supports are then
//! softmax-normalized into likelihoods. Comparing the kept set with the
//! original label gives the image's diagnosis.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expertise::{full_score, ExpertiseEstimate};
use crate::ingestion::PredictionMatrix;
use crate::label_space::{LabelId, LabelSet, LabelVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Absolute,
    #[default]
    FractionOfFullScore,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Absolute => "absolute",
            ThresholdMode::FractionOfFullScore => "fraction_of_full_score",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub threshold: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    pub top_k: usize,
    /// Methods whose votes count. `None` means every method in the matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
}

impl AggregationConfig {
    pub fn new(threshold: f64, threshold_mode: ThresholdMode, top_k: usize) -> Result<Self> {
        let cfg = Self {
            threshold,
            threshold_mode,
            top_k,
            methods: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "aggregation threshold {} must be a non-negative number",
                self.threshold
            )));
        }
        if self.threshold_mode == ThresholdMode::FractionOfFullScore && self.threshold > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "fractional threshold {} exceeds 1",
                self.threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        Ok(())
    }

    /// The support a label needs to be kept.
    pub fn cutoff(&self, full_score: f64) -> Result<f64> {
        match self.threshold_mode {
            ThresholdMode::Absolute => Ok(self.threshold),
            ThresholdMode::FractionOfFullScore if full_score > 0.0 => Ok(self.threshold * full_score),
            ThresholdMode::FractionOfFullScore => Err(Error::InvalidConfig(
                "fractional threshold needs a positive full score".into(),
            )),
        }
    }
}

/// Weighted support per image. Only labels some method predicted appear.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportScores {
    pub images: Vec<String>,
    pub scores: Vec<BTreeMap<LabelId, f64>>,
}

fn weight_vector(matrix: &PredictionMatrix, weights: &[ExpertiseEstimate]) -> Result<Vec<f64>> {
    let by_method: BTreeMap<&str, f64> = weights.iter().map(|e| (e.method.as_str(), e.est_acc)).collect();
    matrix
        .methods()
        .iter()
        .map(|m| {
            let w = *by_method
                .get(m.as_str())
                .ok_or_else(|| Error::MissingWeight(m.clone()))?;
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!("method {m} has weight {w}")));
            }
            Ok(w)
        })
        .collect()
}

/// `score(c) = Σ_i weight_i · [c ∈ prediction_i]` over every method in the
/// matrix. Weights are used as given, without normalization.
pub fn weighted_support(matrix: &PredictionMatrix, weights: &[ExpertiseEstimate]) -> Result<SupportScores> {
    let w = weight_vector(matrix, weights)?;
    let scores = (0..matrix.images().len())
        .into_par_iter()
        .map(|image| {
            let mut support = BTreeMap::new();
            for (method, weight) in w.iter().enumerate() {
                for label in matrix.labels(image, method) {
                    *support.entry(*label).or_insert(0.0) += weight;
                }
            }
            support
        })
        .collect();
    Ok(SupportScores {
        images: matrix.images().to_vec(),
        scores,
    })
}

/// Labels of one image with support at least `cutoff`, best `top_k` first.
/// Ties break by vocabulary order. A label nobody supports (support 0) is
/// never kept, even at a zero cutoff.
pub fn filter_image(support: &BTreeMap<LabelId, f64>, cutoff: f64, top_k: usize) -> Vec<(LabelId, f64)> {
    let mut kept: Vec<(LabelId, f64)> = support
        .iter()
        .filter(|(_, s)| **s > 0.0 && **s >= cutoff)
        .map(|(l, s)| (*l, *s))
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(top_k);
    kept
}

/// Filtered label set of every image.
pub fn filter_labels(scores: &SupportScores, cfg: &AggregationConfig, full_score: f64) -> Result<Vec<LabelSet>> {
    cfg.validate()?;
    let cutoff = cfg.cutoff(full_score)?;
    Ok(scores
        .scores
        .iter()
        .map(|s| filter_image(s, cutoff, cfg.top_k).into_iter().map(|(l, _)| l).collect())
        .collect())
}

/// Softmax over the kept supports, shifted by the maximum for stability.
pub fn softmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    let max = scores.iter().copied().reduce(f64::max).ok_or(Error::EmptyLabelSet)?;
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Clean,
    NoisyLabel,
    MissingLabel,
    NoisyAndMissing,
    Unresolved,
}

impl Diagnosis {
    pub fn is_noisy(self) -> bool {
        matches!(self, Diagnosis::NoisyLabel | Diagnosis::NoisyAndMissing)
    }

    pub fn is_missing(self) -> bool {
        matches!(self, Diagnosis::MissingLabel | Diagnosis::NoisyAndMissing)
    }

    /// Everything but `clean` goes to human review.
    pub fn is_flagged(self) -> bool {
        self != Diagnosis::Clean
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Clean => "clean",
            Diagnosis::NoisyLabel => "noisy_label",
            Diagnosis::MissingLabel => "missing_label",
            Diagnosis::NoisyAndMissing => "noisy_and_missing",
            Diagnosis::Unresolved => "unresolved",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn diagnose(original: LabelId, filtered: &[LabelId]) -> Diagnosis {
    let has_original = filtered.contains(&original);
    match (filtered.len(), has_original) {
        (0, _) => Diagnosis::Unresolved,
        (1, true) => Diagnosis::Clean,
        (1, false) => Diagnosis::NoisyLabel,
        (_, true) => Diagnosis::MissingLabel,
        (_, false) => Diagnosis::NoisyAndMissing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftLabel {
    pub label: LabelId,
    pub score: f64,
    pub likelihood: f64,
}

/// The renovated label of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub image_id: String,
    pub original: LabelId,
    /// Score descending, then vocabulary order.
    pub entries: Vec<SoftLabel>,
    pub diagnosis: Diagnosis,
}

impl SoftLabelSet {
    pub fn label_set(&self) -> LabelSet {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn to_line(&self, vocab: &LabelVocabulary) -> SoftLabelLine {
        SoftLabelLine {
            image_id: self.image_id.clone(),
            original: vocab.name(self.original).to_string(),
            labels: self
                .entries
                .iter()
                .map(|e| SoftLabelEntry {
                    label: vocab.name(e.label).to_string(),
                    score: e.score,
                    likelihood: e.likelihood,
                })
                .collect(),
            diagnosis: self.diagnosis,
        }
    }

    pub fn from_line(line: &SoftLabelLine, vocab: &LabelVocabulary) -> Result<Self> {
        Ok(Self {
            image_id: line.image_id.clone(),
            original: vocab.require(&line.original)?,
            entries: line
                .labels
                .iter()
                .map(|e| {
                    Ok(SoftLabel {
                        label: vocab.require(&e.label)?,
                        score: e.score,
                        likelihood: e.likelihood,
                    })
                })
                .collect::<Result<_>>()?,
            diagnosis: line.diagnosis,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelEntry {
    pub label: String,
    pub score: f64,
    pub likelihood: f64,
}

/// One line of the soft-label output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelLine {
    pub image_id: String,
    pub original: String,
    pub labels: Vec<SoftLabelEntry>,
    pub diagnosis: Diagnosis,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisCounts {
    pub clean: usize,
    pub noisy_label: usize,
    pub missing_label: usize,
    pub noisy_and_missing: usize,
    pub unresolved: usize,
}

impl DiagnosisCounts {
    pub fn add(&mut self, d: Diagnosis) {
        match d {
            Diagnosis::Clean => self.clean += 1,
            Diagnosis::NoisyLabel => self.noisy_label += 1,
            Diagnosis::MissingLabel => self.missing_label += 1,
            Diagnosis::NoisyAndMissing => self.noisy_and_missing += 1,
            Diagnosis::Unresolved => self.unresolved += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.clean + self.noisy_label + self.missing_label + self.noisy_and_missing + self.unresolved
    }
}

/// Dataset-level renovation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenovationReport {
    pub dataset_id: String,
    pub image_count: usize,
    /// Images whose original label was not kept (`noisy_label` + `noisy_and_missing`).
    pub noisy_label_count: usize,
    /// Images with kept labels beyond the original (`missing_label` + `noisy_and_missing`).
    pub missing_label_count: usize,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub cutoff: f64,
    pub full_score: f64,
    pub top_k: usize,
    pub methods: Vec<String>,
    pub diagnoses: DiagnosisCounts,
}

/// Everything a renovation pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Renovation {
    pub soft_labels: Vec<SoftLabelSet>,
    pub report: RenovationReport,
    pub support: SupportScores,
}

impl Renovation {
    /// Distance between the weakest kept label and the strongest dropped
    /// one, per image. Small margins mark the least certain images.
    pub fn margins(&self) -> Vec<f64> {
        self.soft_labels
            .iter()
            .zip(&self.support.scores)
            .map(|(soft, support)| {
                let kept = soft.label_set();
                let floor = soft
                    .entries
                    .iter()
                    .map(|e| e.score)
                    .reduce(f64::min)
                    .unwrap_or(self.report.cutoff);
                let best_dropped = support
                    .iter()
                    .filter(|(l, _)| !kept.contains(l))
                    .map(|(_, s)| *s)
                    .fold(0.0, f64::max);
                floor - best_dropped
            })
            .collect()
    }
}

/// Runs support → filter → softmax → diagnosis for every image.
/// `originals[i]` is the original label of `matrix.images()[i]`.
pub fn renovate(
    matrix: &PredictionMatrix,
    weights: &[ExpertiseEstimate],
    originals: &[LabelId],
    cfg: &AggregationConfig,
) -> Result<Renovation> {
    cfg.validate()?;
    if originals.len() != matrix.images().len() {
        return Err(Error::InvalidConfig(format!(
            "{} original labels for {} images",
            originals.len(),
            matrix.images().len()
        )));
    }
    let contributing;
    let matrix = match &cfg.methods {
        Some(methods) => {
            contributing = matrix.select_methods(methods)?;
            &contributing
        }
        None => matrix,
    };

    let ordered: Vec<ExpertiseEstimate> = {
        let by_method: BTreeMap<&str, &ExpertiseEstimate> = weights.iter().map(|e| (e.method.as_str(), e)).collect();
        matrix
            .methods()
            .iter()
            .map(|m| {
                by_method
                    .get(m.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::MissingWeight(m.clone()))
            })
            .collect::<Result<_>>()?
    };
    let full = full_score(matrix.dataset_id(), &ordered)?;
    let cutoff = cfg.cutoff(full.value)?;
    let support = weighted_support(matrix, &ordered)?;

    let soft_labels: Vec<SoftLabelSet> = support
        .scores
        .par_iter()
        .zip(matrix.images().par_iter())
        .zip(originals.par_iter())
        .map(|((scores, image_id), original)| {
            let kept = filter_image(scores, cutoff, cfg.top_k);
            let labels: Vec<LabelId> = kept.iter().map(|(l, _)| *l).collect();
            let entries = if kept.is_empty() {
                Vec::new()
            } else {
                let values: Vec<f64> = kept.iter().map(|(_, s)| *s).collect();
                let likelihoods = softmax_normalize(&values)?;
                kept.iter()
                    .zip(likelihoods)
                    .map(|((label, score), likelihood)| SoftLabel {
                        label: *label,
                        score: *score,
                        likelihood,
                    })
                    .collect()
            };
            Ok(SoftLabelSet {
                image_id: image_id.clone(),
                original: *original,
                entries,
                diagnosis: diagnose(*original, &labels),
            })
        })
        .collect::<Result<_>>()?;

    let mut counts = DiagnosisCounts::default();
    for s in &soft_labels {
        counts.add(s.diagnosis);
    }
    let report = RenovationReport {
        dataset_id: matrix.dataset_id().to_string(),
        image_count: soft_labels.len(),
        noisy_label_count: counts.noisy_label + counts.noisy_and_missing,
        missing_label_count: counts.missing_label + counts.noisy_and_missing,
        threshold: cfg.threshold,
        threshold_mode: cfg.threshold_mode,
        cutoff,
        full_score: full.value,
        top_k: cfg.top_k,
        methods: full.methods,
        diagnoses: counts,
    };
    Ok(Renovation {
        soft_labels,
        report,
        support,
    })
}
