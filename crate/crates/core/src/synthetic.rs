//! Synthetic datasets with planted truths and simulated predictors, a
//! brute-force reference for the whole calibrate-and-aggregate pipeline,
//! and recovery metrics that compare estimates with what was planted.
//!
//! The oracle here is written as plain nested loops over a dense
//! image × method × label cube and shares no aggregation code with the
//! engine. When the two disagree, suspect the engine.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationConfig, Diagnosis, SoftLabelSet, ThresholdMode};
use crate::error::{Error, Result};
use crate::expertise::ExpertiseEstimate;
use crate::ingestion::{Cell, PredictionMatrix, ORIGIN_METHOD};
use crate::label_space::{LabelId, LabelSet, LabelVocabulary};
use crate::pipeline::{calibrate_and_renovate, Calibrated, PredictionSource, RunConfig};
use crate::voting::CalibrationSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedMethod {
    /// Probability of emitting each true label.
    pub accuracy: f64,
    /// Mean number of labels per image; spurious labels make up the rest.
    pub volume_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_count: usize,
    pub label_space_size: usize,
    pub methods: Vec<SimulatedMethod>,
    /// Fraction of images with more than one true label.
    pub multi_label_fraction: f64,
    /// Fraction of images whose original label is replaced by a wrong one.
    pub noisy_original_fraction: f64,
    #[serde(default = "default_calibration_size")]
    pub calibration_size: usize,
    /// Vote threshold for pseudo ground truth; `None` means ⌈m/2⌉.
    #[serde(default)]
    pub vote_threshold: Option<usize>,
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationConfig,
}

fn default_calibration_size() -> usize {
    100
}

fn default_aggregation() -> AggregationConfig {
    AggregationConfig {
        threshold: 0.25,
        threshold_mode: ThresholdMode::FractionOfFullScore,
        top_k: 3,
        methods: None,
    }
}

impl Default for SyntheticSpec {
    /// Six predictors with accuracies evenly spread over [0.3, 0.95],
    /// 50 labels, 100 calibration images out of 400.
    fn default() -> Self {
        let methods = (0..6)
            .map(|i| SimulatedMethod {
                accuracy: 0.3 + 0.13 * i as f64,
                volume_bias: 1.5,
            })
            .collect();
        Self {
            seed: 0,
            image_count: 400,
            label_space_size: 50,
            methods,
            multi_label_fraction: 0.3,
            noisy_original_fraction: 0.05,
            calibration_size: default_calibration_size(),
            vote_threshold: None,
            aggregation: default_aggregation(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {v} is not a probability")))
            }
        };
        if self.image_count == 0 || self.label_space_size < 2 || self.methods.is_empty() {
            return Err(Error::InvalidConfig(
                "synthetic spec needs images, at least two labels and one method".into(),
            ));
        }
        unit("multi_label_fraction", self.multi_label_fraction)?;
        unit("noisy_original_fraction", self.noisy_original_fraction)?;
        for m in &self.methods {
            unit("accuracy", m.accuracy)?;
            if !m.volume_bias.is_finite() || m.volume_bias < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "volume_bias {} is negative",
                    m.volume_bias
                )));
            }
        }
        if self.calibration_size == 0 {
            return Err(Error::InvalidConfig("calibration_size must be at least 1".into()));
        }
        self.aggregation.validate()
    }

    pub fn method_names(&self) -> Vec<String> {
        (0..self.methods.len()).map(|i| format!("sim-{i:02}")).collect()
    }
}

/// True label sets and the (possibly corrupted) original label per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedTruth {
    pub truth: Vec<LabelSet>,
    pub originals: Vec<LabelId>,
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub spec: SyntheticSpec,
    pub vocab: LabelVocabulary,
    pub planted: PlantedTruth,
    /// Simulated methods plus the original labels as method `origin`.
    pub matrix: PredictionMatrix,
    pub origin_method: String,
}

fn sample_excluding(rng: &mut ChaCha8Rng, n: usize, exclude: &LabelSet, count: usize) -> Vec<LabelId> {
    let pool: Vec<LabelId> = (0..n as u32).map(LabelId).filter(|l| !exclude.contains(l)).collect();
    pool.choose_multiple(rng, count.min(pool.len())).copied().collect()
}

/// Builds a dataset from the spec. A pure function of the spec, seed included.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_labels = spec.label_space_size;
    let vocab = LabelVocabulary::new(
        format!("synthetic-{}", spec.seed),
        (0..n_labels).map(|i| format!("class {i:03}")).collect(),
    )?;
    let images: Vec<String> = (0..spec.image_count).map(|i| format!("img-{i:05}")).collect();
    let mut names = spec.method_names();
    names.push(ORIGIN_METHOD.to_string());
    let mut matrix = PredictionMatrix::empty(vocab.dataset_id(), names.clone(), images)?;
    let method_cols: Vec<usize> = names.iter().map(|n| matrix.method_index(n).unwrap()).collect();
    let origin_col = *method_cols.last().unwrap();

    let mut truth = Vec::with_capacity(spec.image_count);
    let mut originals = Vec::with_capacity(spec.image_count);
    for image in 0..spec.image_count {
        let primary = LabelId(rng.gen_range(0..n_labels as u32));
        let mut labels = LabelSet::from([primary]);
        if rng.gen_bool(spec.multi_label_fraction) {
            let extra = rng.gen_range(1..=2usize);
            labels.extend(sample_excluding(&mut rng, n_labels, &labels, extra));
        }
        let original = if rng.gen_bool(spec.noisy_original_fraction) {
            sample_excluding(&mut rng, n_labels, &labels, 1)
                .first()
                .copied()
                .unwrap_or(primary)
        } else {
            primary
        };

        for (m, method) in spec.methods.iter().enumerate() {
            let mut emitted: LabelSet = labels
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(method.accuracy))
                .collect();
            let room = (method.volume_bias - emitted.len() as f64).max(0.0);
            let spurious = room.floor() as usize + usize::from(rng.gen_bool(room.fract()));
            emitted.extend(sample_excluding(&mut rng, n_labels, &labels, spurious));
            matrix.set_cell(image, method_cols[m], Cell::from_labels(emitted));
        }
        matrix.set_cell(image, origin_col, Cell::from_labels([original]));
        truth.push(labels);
        originals.push(original);
    }

    Ok(SyntheticInstance {
        spec: spec.clone(),
        vocab,
        planted: PlantedTruth { truth, originals },
        matrix,
        origin_method: ORIGIN_METHOD.to_string(),
    })
}

/// Inputs to the reference pipeline, as plain data.
#[derive(Debug, Clone)]
pub struct OracleInput {
    /// `cube[image][method][label]`: did the method predict the label.
    pub cube: Vec<Vec<Vec<bool>>>,
    pub methods: Vec<String>,
    pub originals: Vec<LabelId>,
    /// The first `calibration_size` images form the calibration subset.
    pub calibration_size: usize,
    pub vote_threshold: usize,
    /// Fixed weights per method; estimated from the calibration subset when absent.
    pub weights: Option<Vec<f64>>,
    pub threshold: f64,
    pub fractional: bool,
    pub top_k: usize,
}

impl OracleInput {
    pub fn from_matrix(
        matrix: &PredictionMatrix,
        label_space_size: usize,
        originals: &[LabelId],
        calibration_size: usize,
        vote_threshold: usize,
        cfg: &AggregationConfig,
    ) -> Self {
        let methods = matrix.methods().to_vec();
        let cube = (0..matrix.images().len())
            .map(|image| {
                (0..methods.len())
                    .map(|m| {
                        let mut row = vec![false; label_space_size];
                        for l in matrix.labels(image, m) {
                            row[l.index()] = true;
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        Self {
            cube,
            methods,
            originals: originals.to_vec(),
            calibration_size,
            vote_threshold,
            weights: None,
            threshold: cfg.threshold,
            fractional: cfg.threshold_mode == ThresholdMode::FractionOfFullScore,
            top_k: cfg.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleImage {
    /// (label, score, likelihood), best first.
    pub entries: Vec<(LabelId, f64, f64)>,
    pub diagnosis: Diagnosis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub weights: Vec<f64>,
    pub full_score: f64,
    pub images: Vec<OracleImage>,
}

/// Reference evaluation of vote → pseudo ground truth → expertise →
/// support → threshold/top-K → softmax → diagnosis by exhaustive loops.
#[allow(clippy::needless_range_loop)]
pub fn brute_force_pipeline(input: &OracleInput) -> Result<OracleOutput> {
    let n_images = input.cube.len();
    let n_methods = input.methods.len();
    let n_labels = input.cube.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if n_methods > 12 || n_labels > 64 || n_images > 1000 {
        return Err(Error::InstanceTooLarge(format!(
            "{n_images} images, {n_methods} methods, {n_labels} labels"
        )));
    }
    if n_images == 0 || n_methods == 0 || n_labels == 0 {
        return Err(Error::InvalidConfig("oracle instance is empty".into()));
    }

    let weights = match &input.weights {
        Some(w) => w.clone(),
        None => {
            let k = input.vote_threshold;
            if k < 1 || k > n_methods {
                return Err(Error::VoteThresholdOutOfRange { k, methods: n_methods });
            }
            let n = input.calibration_size.min(n_images);
            let mut truth = vec![vec![false; n_labels]; n];
            for j in 0..n {
                for c in 0..n_labels {
                    let mut votes = 0;
                    for i in 0..n_methods {
                        if input.cube[j][i][c] {
                            votes += 1;
                        }
                    }
                    truth[j][c] = votes >= k;
                }
            }
            let mut weights = Vec::with_capacity(n_methods);
            for i in 0..n_methods {
                let (mut hits, mut truth_total, mut predicted_total) = (0usize, 0usize, 0usize);
                for j in 0..n {
                    for c in 0..n_labels {
                        let p = input.cube[j][i][c];
                        let t = truth[j][c];
                        if p && t {
                            hits += 1;
                        }
                        if t {
                            truth_total += 1;
                        }
                        if p {
                            predicted_total += 1;
                        }
                    }
                }
                if truth_total == 0 {
                    return Err(Error::DegenerateGroundTruth);
                }
                let coverage = hits as f64 / truth_total as f64;
                let mut penalty = 1.0 - predicted_total as f64 / (n * n_labels) as f64;
                if penalty < 0.0 {
                    penalty = 0.0;
                }
                let mut w = coverage * penalty;
                if w < 0.0 {
                    w = 0.0;
                }
                weights.push(w);
            }
            weights
        }
    };

    let mut full_score = 0.0;
    for w in &weights {
        full_score += w;
    }
    let cutoff = if input.fractional {
        if full_score <= 0.0 {
            return Err(Error::InvalidConfig(
                "fractional threshold needs a positive full score".into(),
            ));
        }
        input.threshold * full_score
    } else {
        input.threshold
    };

    let mut images = Vec::with_capacity(n_images);
    for j in 0..n_images {
        let mut score = vec![0.0f64; n_labels];
        for (c, s) in score.iter_mut().enumerate() {
            for i in 0..n_methods {
                if input.cube[j][i][c] {
                    *s += weights[i];
                }
            }
        }
        let mut remaining: Vec<usize> = (0..n_labels)
            .filter(|&c| score[c] > 0.0 && score[c] >= cutoff)
            .collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < input.top_k && !remaining.is_empty() {
            let mut best = 0;
            for pos in 1..remaining.len() {
                if score[remaining[pos]] > score[remaining[best]] {
                    best = pos;
                }
            }
            chosen.push(remaining.remove(best));
        }

        let denom: f64 = chosen.iter().map(|&c| score[c].exp()).sum();
        let entries: Vec<(LabelId, f64, f64)> = chosen
            .iter()
            .map(|&c| (LabelId(c as u32), score[c], score[c].exp() / denom))
            .collect();

        let original = input.originals[j].index();
        let has_original = chosen.contains(&original);
        let diagnosis = if chosen.is_empty() {
            Diagnosis::Unresolved
        } else if chosen.len() == 1 && has_original {
            Diagnosis::Clean
        } else if chosen.len() == 1 {
            Diagnosis::NoisyLabel
        } else if has_original {
            Diagnosis::MissingLabel
        } else {
            Diagnosis::NoisyAndMissing
        };
        images.push(OracleImage { entries, diagnosis });
    }

    Ok(OracleOutput {
        weights,
        full_score,
        images,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant (or shorter than two).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut out = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start;
            while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
                end += 1;
            }
            let rank = (start + end) as f64 / 2.0 + 1.0;
            for &i in &idx[start..=end] {
                out[i] = rank;
            }
            start = end + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecovery {
    pub method: String,
    pub planted_accuracy: f64,
    pub estimated_accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    /// `None` when planted or estimated accuracies are all equal.
    pub rank_correlation: Option<f64>,
    pub methods: Vec<MethodRecovery>,
    pub ensemble_recall: f64,
    pub ensemble_precision: f64,
    pub best_single_recall: f64,
}

impl RecoveryReport {
    pub fn ensemble_beats_best_single(&self) -> bool {
        self.ensemble_recall >= self.best_single_recall
    }
}

fn recall_precision<'a>(
    predicted: impl Iterator<Item = LabelSet>,
    truth: impl Iterator<Item = &'a LabelSet>,
) -> (f64, f64) {
    let (mut hits, mut t_total, mut p_total) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.zip(truth) {
        hits += p.intersection(t).count();
        t_total += t.len();
        p_total += p.len();
    }
    let recall = if t_total == 0 {
        0.0
    } else {
        hits as f64 / t_total as f64
    };
    let precision = if p_total == 0 {
        0.0
    } else {
        hits as f64 / p_total as f64
    };
    (recall, precision)
}

/// Compares estimated expertise and renovated labels with the planted truth.
pub fn recovery_metrics(
    instance: &SyntheticInstance,
    estimates: &[ExpertiseEstimate],
    soft_labels: &[SoftLabelSet],
) -> Result<RecoveryReport> {
    let names = instance.spec.method_names();
    let mut methods = Vec::with_capacity(names.len());
    for (name, planted) in names.iter().zip(&instance.spec.methods) {
        let est = estimates
            .iter()
            .find(|e| &e.method == name)
            .ok_or_else(|| Error::MissingWeight(name.clone()))?;
        let col = instance.matrix.require_method(name)?;
        let (recall, precision) = recall_precision(
            (0..instance.matrix.images().len()).map(|i| instance.matrix.labels(i, col).clone()),
            instance.planted.truth.iter(),
        );
        methods.push(MethodRecovery {
            method: name.clone(),
            planted_accuracy: planted.accuracy,
            estimated_accuracy: est.est_acc,
            recall,
            precision,
        });
    }
    let planted: Vec<f64> = methods.iter().map(|m| m.planted_accuracy).collect();
    let estimated: Vec<f64> = methods.iter().map(|m| m.estimated_accuracy).collect();
    let (ensemble_recall, ensemble_precision) = recall_precision(
        soft_labels.iter().map(SoftLabelSet::label_set),
        instance.planted.truth.iter(),
    );
    let best_single_recall = methods.iter().map(|m| m.recall).fold(0.0, f64::max);
    Ok(RecoveryReport {
        seed: instance.spec.seed,
        rank_correlation: spearman(&planted, &estimated),
        methods,
        ensemble_recall,
        ensemble_precision,
        best_single_recall,
    })
}

/// Generates an instance, runs the engine on it with the spec's
/// calibration size, vote threshold and aggregation, and scores the result.
pub fn simulate(spec: &SyntheticSpec) -> Result<(SyntheticInstance, Calibrated, RecoveryReport)> {
    let instance = generate(spec)?;
    let calibration = CalibrationSet::first_n(instance.matrix.images(), spec.calibration_size)?;
    let calibrated = calibrate_and_renovate(
        &instance.matrix,
        instance.vocab.len(),
        &instance.planted.originals,
        &calibration,
        spec.vote_threshold,
        &spec.aggregation,
    )?;
    let report = recovery_metrics(&instance, &calibrated.estimates, &calibrated.renovation.soft_labels)?;
    Ok((instance, calibrated, report))
}

#[derive(Debug, Serialize)]
struct TruthLine {
    image_id: String,
    labels: Vec<String>,
    original: String,
}

/// Writes an instance as a runnable dataset: `vocabulary.json`,
/// `universe.txt`, `predictions.jsonl`, `truth.jsonl` (planted labels) and
/// `run.json`, a run config with output in `out/`. Returns the config path.
pub fn write_dataset(instance: &SyntheticInstance, dir: &Path) -> Result<PathBuf> {
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = &instance.vocab;
    let mut vocab_json =
        serde_json::to_string_pretty(&vocab.to_file_contents()).map_err(|e| Error::json("vocabulary", e))?;
    vocab_json.push('\n');
    write("vocabulary.json", vocab_json)?;
    write(
        "universe.txt",
        instance.matrix.images().iter().map(|i| format!("{i}\n")).collect(),
    )?;
    write("predictions.jsonl", instance.matrix.to_jsonl(vocab))?;
    let mut truth = String::new();
    for ((image, labels), original) in instance
        .matrix
        .images()
        .iter()
        .zip(&instance.planted.truth)
        .zip(&instance.planted.originals)
    {
        let line = TruthLine {
            image_id: image.clone(),
            labels: vocab.names(labels),
            original: vocab.name(*original).to_string(),
        };
        truth.push_str(&serde_json::to_string(&line).map_err(|e| Error::json("truth", e))?);
        truth.push('\n');
    }
    write("truth.jsonl", truth)?;

    let config = RunConfig {
        dataset_id: vocab.dataset_id().to_string(),
        vocabulary: "vocabulary.json".into(),
        universe: "universe.txt".into(),
        predictions: vec![PredictionSource {
            path: "predictions.jsonl".into(),
            method: None,
            score_filter: None,
            cap: Some(vocab.len()),
        }],
        origin_method: instance.origin_method.clone(),
        calibration_size: instance.spec.calibration_size,
        vote_threshold: instance.spec.vote_threshold,
        aggregation: instance.spec.aggregation.clone(),
        output_dir: "out".into(),
        seed: instance.spec.seed,
        verdict_log: None,
        image_dir: None,
        ui_dir: None,
    };
    let mut body = serde_json::to_string_pretty(&config).map_err(|e| Error::json("run config", e))?;
    body.push('\n');
    write("run.json", body)?;
    Ok(dir.join("run.json"))
}

/// Labels that never occur in the planted truth of any image; handy for
/// checking that spurious labels stay outside the truth.
pub fn unused_labels(instance: &SyntheticInstance) -> BTreeSet<LabelId> {
    let used: BTreeSet<LabelId> = instance.planted.truth.iter().flatten().copied().collect();
    instance.vocab.ids().filter(|l| !used.contains(l)).collect()
}
