//! Run orchestration: config loading, ingest → vote → verdicts → expertise
//! → aggregation → report, the append-only verdict log, and the review
//! session behind the wire API.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{renovate, AggregationConfig, Diagnosis, Renovation, RenovationReport, SoftLabelEntry};
use crate::error::{Error, Result};
use crate::expertise::{estimate_all, ExpertiseEstimate};
use crate::ingestion::{
    filter_scored, load_universe, merge, parse_predictions_file, LineError, PredictionMatrix, ScoreFilterConfig,
    ORIGIN_METHOD,
};
use crate::label_space::{LabelId, LabelSet, LabelVocabulary};
use crate::voting::{
    default_vote_threshold, effective_ground_truth, pseudo_ground_truth, tally_votes, CalibrationSet, GroundTruth,
    PseudoGroundTruth, DEFAULT_CALIBRATION_SIZE,
};

/// Default cap on labels accepted from a single response.
pub const DEFAULT_LABEL_CAP: usize = 10;

pub const EXPERTISE_FILE: &str = "expertise.json";
pub const SOFT_LABELS_FILE: &str = "soft_labels.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";
pub const VERDICT_LOG_FILE: &str = "verdicts.jsonl";

/// One predictions file of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSource {
    pub path: PathBuf,
    /// When set, every record in the file must carry this method id.
    #[serde(default)]
    pub method: Option<String>,
    /// Threshold / top-t applied to score-typed methods.
    #[serde(default)]
    pub score_filter: Option<ScoreFilterConfig>,
    #[serde(default)]
    pub cap: Option<usize>,
}

fn default_origin() -> String {
    ORIGIN_METHOD.to_string()
}

fn default_calibration() -> usize {
    DEFAULT_CALIBRATION_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_id: String,
    pub vocabulary: PathBuf,
    pub universe: PathBuf,
    pub predictions: Vec<PredictionSource>,
    #[serde(default = "default_origin")]
    pub origin_method: String,
    #[serde(default = "default_calibration")]
    pub calibration_size: usize,
    /// Minimum votes for pseudo ground truth; `⌈m/2⌉` when absent.
    #[serde(default)]
    pub vote_threshold: Option<usize>,
    pub aggregation: AggregationConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `verdicts.jsonl` inside the output directory.
    #[serde(default)]
    pub verdict_log: Option<PathBuf>,
    /// Directory holding image files named after their image ids.
    #[serde(default)]
    pub image_dir: Option<PathBuf>,
    /// Built review UI assets.
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses JSON, or TOML when the file ends in `.toml`. Relative paths
    /// are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(
            &text,
            path.extension().is_some_and(|e| e == "toml"),
            &path.display().to_string(),
        )?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn parse(text: &str, is_toml: bool, context: &str) -> Result<Self> {
        if is_toml {
            toml::from_str(text).map_err(|e| Error::Parse {
                context: context.to_string(),
                message: e.to_string(),
            })
        } else {
            serde_json::from_str(text).map_err(|e| Error::json(context, e))
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.vocabulary);
        fix(&mut self.universe);
        fix(&mut self.output_dir);
        for source in &mut self.predictions {
            fix(&mut source.path);
        }
        for p in [&mut self.verdict_log, &mut self.image_dir, &mut self.ui_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Checks everything that can be checked before any file is written.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_id.trim().is_empty() {
            return Err(Error::InvalidConfig("dataset_id is empty".into()));
        }
        if self.calibration_size == 0 {
            return Err(Error::InvalidConfig("calibration_size must be at least 1".into()));
        }
        if self.predictions.is_empty() {
            return Err(Error::InvalidConfig("no prediction files configured".into()));
        }
        self.aggregation.validate()?;
        let mut methods = BTreeSet::new();
        for source in &self.predictions {
            if let Some(m) = &source.method {
                if !methods.insert(m.as_str()) {
                    return Err(Error::DuplicateMethod(m.clone()));
                }
            }
            if let Some(f) = &source.score_filter {
                f.validate()?;
            }
            if source.cap == Some(0) {
                return Err(Error::InvalidConfig(format!(
                    "{}: cap must be at least 1",
                    source.path.display()
                )));
            }
        }
        let mut required: Vec<&Path> = vec![&self.vocabulary, &self.universe];
        required.extend(self.predictions.iter().map(|s| s.path.as_path()));
        for path in required {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn verdict_log_path(&self) -> PathBuf {
        self.verdict_log
            .clone()
            .unwrap_or_else(|| self.output_dir.join(VERDICT_LOG_FILE))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SourceReport {
    pub path: String,
    pub methods: Vec<String>,
    pub records: usize,
    pub malformed: Vec<LineError>,
    pub rejected_out_of_vocab: usize,
    pub duplicates_removed: usize,
    pub truncated: usize,
    pub null_responses: usize,
    /// Labels dropped by the score threshold / top-t filter.
    pub score_filtered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub dataset_id: String,
    pub images: usize,
    pub methods: Vec<String>,
    pub sources: Vec<SourceReport>,
}

/// Inputs of a run, loaded and merged.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: LabelVocabulary,
    pub universe: Vec<String>,
    pub matrix: PredictionMatrix,
    pub originals: Vec<LabelId>,
    pub ingest: IngestReport,
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Loads vocabulary, universe and prediction files into one matrix.
pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let vocab = LabelVocabulary::load(&config.vocabulary)?;
    if vocab.dataset_id() != config.dataset_id {
        return Err(Error::InvalidConfig(format!(
            "vocabulary belongs to {:?}, config to {:?}",
            vocab.dataset_id(),
            config.dataset_id
        )));
    }
    let universe = load_universe(&config.universe)?;

    let mut records = Vec::new();
    let mut sources = Vec::new();
    for source in &config.predictions {
        let parsed = parse_predictions_file(&source.path, &vocab, source.cap.unwrap_or(DEFAULT_LABEL_CAP))?;
        let mut report = SourceReport {
            path: display_name(&source.path),
            methods: parsed.methods.iter().cloned().collect(),
            records: parsed.records.len(),
            malformed: parsed.errors.clone(),
            ..SourceReport::default()
        };
        if let Some(expected) = &source.method {
            if let Some(other) = parsed.methods.iter().find(|m| *m != expected) {
                return Err(Error::InvalidConfig(format!(
                    "{} is configured as method {expected:?} but contains records of {other:?}",
                    source.path.display()
                )));
            }
        }
        for line in parsed.records {
            let r = &line.report;
            report.rejected_out_of_vocab += r.rejected_out_of_vocab.len();
            report.duplicates_removed += r.duplicates_removed;
            report.truncated += usize::from(r.truncated);
            report.null_responses += usize::from(r.was_null);
            let record = match &source.score_filter {
                Some(cfg) => {
                    let kept = filter_scored(&line.record, cfg)?;
                    let before = if line.record.labels.is_empty() {
                        line.record.scores.as_ref().map_or(0, BTreeMap::len)
                    } else {
                        line.record.labels.len()
                    };
                    report.score_filtered += before - kept.labels.len();
                    kept
                }
                None => line.record,
            };
            records.push(record);
        }
        sources.push(report);
    }

    let matrix = merge(&config.dataset_id, &records, &universe)?;
    if matrix.method_index(&config.origin_method).is_none() {
        return Err(Error::MissingOriginal(format!(
            "no prediction file provides the origin method {:?}",
            config.origin_method
        )));
    }
    let originals = matrix.originals(&config.origin_method)?;
    let ingest = IngestReport {
        dataset_id: config.dataset_id.clone(),
        images: universe.len(),
        methods: matrix.methods().to_vec(),
        sources,
    };
    Ok(Prepared {
        vocab,
        universe,
        matrix,
        originals,
        ingest,
    })
}

/// Result of calibrating expertise and renovating every image.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub pseudo: PseudoGroundTruth,
    pub ground_truth: GroundTruth,
    pub estimates: Vec<ExpertiseEstimate>,
    pub renovation: Renovation,
}

/// Vote on the calibration images, override with verified sets, estimate
/// every method's accuracy and aggregate.
pub fn calibrate_and_renovate(
    matrix: &PredictionMatrix,
    label_space_size: usize,
    originals: &[LabelId],
    calibration: &CalibrationSet,
    vote_threshold: Option<usize>,
    cfg: &AggregationConfig,
) -> Result<Calibrated> {
    let k = vote_threshold.unwrap_or_else(|| default_vote_threshold(matrix.methods().len()));
    let tally = tally_votes(matrix, &calibration.image_ids)?;
    let pseudo = pseudo_ground_truth(&tally, k)?;
    let ground_truth = effective_ground_truth(&pseudo, calibration);
    let estimates = estimate_all(matrix, &ground_truth, label_space_size)?;
    let renovation = renovate(matrix, &estimates, originals, cfg)?;
    Ok(Calibrated {
        pseudo,
        ground_truth,
        estimates,
        renovation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictContext {
    #[default]
    Calibration,
    Flagged,
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub image_id: String,
    pub labels: Vec<String>,
    pub reviewer: String,
    /// RFC 3339.
    pub timestamp: String,
    #[serde(default)]
    pub context: VerdictContext,
}

/// A verdict that passed validation against the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub line: usize,
    pub record: VerdictRecord,
    pub labels: LabelSet,
    pub at: DateTime<FixedOffset>,
}

fn validate_verdict(record: &VerdictRecord, vocab: &LabelVocabulary) -> Result<(LabelSet, DateTime<FixedOffset>)> {
    let labels = record
        .labels
        .iter()
        .map(|l| vocab.require(l))
        .collect::<Result<LabelSet>>()?;
    let at = DateTime::parse_from_rfc3339(&record.timestamp).map_err(|e| Error::Parse {
        context: format!("timestamp {:?}", record.timestamp),
        message: e.to_string(),
    })?;
    Ok((labels, at))
}

/// Reads a verdict log. A missing file is an empty log; corrupt lines are
/// skipped with a warning and reported.
pub fn load_verdicts(path: &Path, vocab: &LabelVocabulary) -> Result<(Vec<Verdict>, Vec<LineError>)> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), Vec::new())),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(parse_verdicts(&text, vocab))
}

pub fn parse_verdicts(text: &str, vocab: &LabelVocabulary) -> (Vec<Verdict>, Vec<LineError>) {
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<VerdictRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|record| {
                validate_verdict(&record, vocab)
                    .map(|(labels, at)| (record, labels, at))
                    .map_err(|e| e.to_string())
            });
        match parsed {
            Ok((record, labels, at)) => verdicts.push(Verdict {
                line: i + 1,
                record,
                labels,
                at,
            }),
            Err(message) => {
                log::warn!("skipping verdict log line {}: {message}", i + 1);
                skipped.push(LineError { line: i + 1, message });
            }
        }
    }
    (verdicts, skipped)
}

/// Latest verdict per image. Equal timestamps go to the later log line.
pub fn latest_verdicts(verdicts: &[Verdict]) -> BTreeMap<String, &Verdict> {
    let mut latest: BTreeMap<String, &Verdict> = BTreeMap::new();
    for v in verdicts {
        match latest.get(&v.record.image_id) {
            Some(current) if current.at > v.at => {}
            _ => {
                latest.insert(v.record.image_id.clone(), v);
            }
        }
    }
    latest
}

/// Effective ground truth: the latest verdict for each calibration image
/// overrides its pseudo ground truth.
pub fn apply_verdicts(verdicts: &[Verdict], pseudo: &PseudoGroundTruth, calibration: &CalibrationSet) -> GroundTruth {
    effective_ground_truth(pseudo, &with_verdicts(calibration, verdicts))
}

/// A copy of the calibration set with verdicts on its images marked verified.
pub fn with_verdicts(calibration: &CalibrationSet, verdicts: &[Verdict]) -> CalibrationSet {
    let mut updated = calibration.clone();
    for (image, v) in latest_verdicts(verdicts) {
        if calibration.contains(&image) {
            updated.verified.insert(image, v.labels.clone());
        }
    }
    updated
}

/// Serializes appends to one verdict log file.
#[derive(Debug)]
pub struct VerdictLog {
    path: PathBuf,
}

impl VerdictLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &VerdictRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::json("verdict", e))?;
        line.push('\n');
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseReport {
    pub dataset_id: String,
    pub estimates: Vec<ExpertiseEstimate>,
    /// Sum over the methods contributing to aggregation.
    pub full_score: f64,
    pub contributing_methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct GroundTruthLine {
    image_id: String,
    pseudo: Vec<String>,
    labels: Vec<String>,
    verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest<'a> {
    dataset_id: &'a str,
    engine_version: &'a str,
    seed: u64,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    verdicts_applied: usize,
    outputs: BTreeMap<&'a str, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pretty<T: Serialize>(value: &T, context: &str) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(context, e))?;
    s.push('\n');
    Ok(s)
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>, context: &str) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).map_err(|e| Error::json(context, e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn expertise_report(matrix: &PredictionMatrix, calibrated: &Calibrated) -> ExpertiseReport {
    let report = &calibrated.renovation.report;
    ExpertiseReport {
        dataset_id: matrix.dataset_id().to_string(),
        estimates: calibrated.estimates.clone(),
        full_score: report.full_score,
        contributing_methods: report.methods.clone(),
    }
}

/// What a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub prepared: Prepared,
    pub calibrated: Calibrated,
    pub verdicts_applied: usize,
    pub files: BTreeMap<&'static str, String>,
}

/// Computes all run outputs without touching the file system beyond reads.
pub fn execute(config: &RunConfig, config_bytes: &[u8]) -> Result<RunOutcome> {
    let prepared = prepare(config)?;
    let (verdicts, _) = load_verdicts(&config.verdict_log_path(), &prepared.vocab)?;
    let base = CalibrationSet::first_n(&prepared.universe, config.calibration_size)?;
    let calibration = with_verdicts(&base, &verdicts);
    let calibrated = calibrate_and_renovate(
        &prepared.matrix,
        prepared.vocab.len(),
        &prepared.originals,
        &calibration,
        config.vote_threshold,
        &config.aggregation,
    )?;

    let vocab = &prepared.vocab;
    let mut files = BTreeMap::new();
    files.insert(INGEST_REPORT_FILE, pretty(&prepared.ingest, "ingest report")?);
    files.insert(PREDICTIONS_FILE, prepared.matrix.to_jsonl(vocab));
    files.insert(
        GROUND_TRUTH_FILE,
        jsonl(
            calibrated
                .ground_truth
                .images
                .iter()
                .zip(&calibrated.ground_truth.sets)
                .zip(&calibrated.pseudo.sets)
                .map(|((image, labels), pseudo)| GroundTruthLine {
                    image_id: image.clone(),
                    pseudo: vocab.names(pseudo),
                    labels: vocab.names(labels),
                    verified: calibration.verified.contains_key(image),
                }),
            "ground truth",
        )?,
    );
    files.insert(
        EXPERTISE_FILE,
        pretty(&expertise_report(&prepared.matrix, &calibrated), "expertise")?,
    );
    files.insert(
        SOFT_LABELS_FILE,
        jsonl(
            calibrated.renovation.soft_labels.iter().map(|s| s.to_line(vocab)),
            "soft labels",
        )?,
    );
    files.insert(REPORT_FILE, pretty(&calibrated.renovation.report, "report")?);

    let mut inputs = BTreeMap::new();
    let mut paths = vec![config.vocabulary.clone(), config.universe.clone()];
    paths.extend(config.predictions.iter().map(|s| s.path.clone()));
    for path in paths {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        inputs.insert(display_name(&path), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        dataset_id: &config.dataset_id,
        engine_version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_sha256: sha256_hex(config_bytes),
        inputs,
        verdicts_applied: calibration.verified.len(),
        outputs: files
            .iter()
            .map(|(name, body)| (*name, sha256_hex(body.as_bytes())))
            .collect(),
    };
    files.insert(MANIFEST_FILE, pretty(&manifest, "manifest")?);

    Ok(RunOutcome {
        verdicts_applied: calibration.verified.len(),
        prepared,
        calibrated,
        files,
    })
}

#[derive(Debug, Serialize)]
struct ErrorFile<'a> {
    kind: &'a str,
    message: String,
}

/// Machine-readable error body, shared by error files and stderr.
pub fn error_json(error: &Error) -> String {
    serde_json::to_string(&ErrorFile {
        kind: error.kind(),
        message: error.to_string(),
    })
    .unwrap_or_else(|_| format!("{{\"kind\":\"{}\"}}", error.kind()))
}

/// Loads, validates and executes a run config, writing every output into
/// the output directory. Validation failures write nothing; later
/// failures leave an `error.json` behind.
pub fn run(config_path: &Path) -> Result<RunOutcome> {
    let config_bytes = fs::read(config_path).map_err(|e| Error::io(config_path, e))?;
    let config = RunConfig::load(config_path)?;
    config.validate()?;
    run_validated(&config, &config_bytes)
}

pub fn run_validated(config: &RunConfig, config_bytes: &[u8]) -> Result<RunOutcome> {
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let error_path = out.join(ERROR_FILE);
    match execute(config, config_bytes) {
        Ok(outcome) => {
            for (name, body) in &outcome.files {
                let path = out.join(name);
                fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            }
            if error_path.exists() {
                fs::remove_file(&error_path).map_err(|e| Error::io(&error_path, e))?;
            }
            Ok(outcome)
        }
        Err(e) => {
            let mut body = error_json(&e);
            body.push('\n');
            fs::write(&error_path, body).map_err(|io| Error::io(&error_path, io))?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueReason {
    Calibration,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub image_id: String,
    pub reason: QueueReason,
    pub diagnosis: Diagnosis,
    /// Smaller means the ensemble is less certain.
    pub margin: f64,
}

/// Calibration images lacking verdicts (calibration order), then flagged
/// images lacking verdicts by ascending margin.
pub fn review_queue(calibration: &CalibrationSet, renovation: &Renovation, verdicts: &[Verdict]) -> Vec<QueueItem> {
    let decided = latest_verdicts(verdicts);
    let margins = renovation.margins();
    let position: BTreeMap<&str, usize> = renovation
        .soft_labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image_id.as_str(), i))
        .collect();

    let mut queue: Vec<QueueItem> = calibration
        .image_ids
        .iter()
        .filter(|id| !decided.contains_key(*id))
        .filter_map(|id| position.get(id.as_str()))
        .map(|&i| QueueItem {
            image_id: renovation.soft_labels[i].image_id.clone(),
            reason: QueueReason::Calibration,
            diagnosis: renovation.soft_labels[i].diagnosis,
            margin: margins[i],
        })
        .collect();

    let mut flagged: Vec<(usize, QueueItem)> = renovation
        .soft_labels
        .iter()
        .enumerate()
        .filter(|(_, s)| s.diagnosis.is_flagged())
        .filter(|(_, s)| !calibration.contains(&s.image_id) && !decided.contains_key(&s.image_id))
        .map(|(i, s)| {
            (
                i,
                QueueItem {
                    image_id: s.image_id.clone(),
                    reason: QueueReason::Flagged,
                    diagnosis: s.diagnosis,
                    margin: margins[i],
                },
            )
        })
        .collect();
    flagged.sort_by(|(ia, a), (ib, b)| a.margin.total_cmp(&b.margin).then(ia.cmp(ib)));
    queue.extend(flagged.into_iter().map(|(_, item)| item));
    queue
}

/// A verdict as submitted over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictSubmission {
    pub image_id: String,
    pub labels: Vec<String>,
    pub reviewer: String,
    /// Server time when absent.
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemView {
    pub image_id: String,
    pub image_url: String,
    pub original: String,
    pub diagnosis: Diagnosis,
    pub in_calibration: bool,
    pub labels: Vec<SoftLabelEntry>,
    /// Every label with non-zero support, best first.
    pub support: Vec<(String, f64)>,
    pub predictions: BTreeMap<String, Vec<String>>,
    pub verdict: Option<Vec<String>>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateDelta {
    pub method: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecomputeSummary {
    pub verdicts_applied: usize,
    pub skipped_log_lines: usize,
    pub full_score_before: f64,
    pub full_score_after: f64,
    pub estimates: Vec<EstimateDelta>,
    pub changed_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportView {
    pub report: RenovationReport,
    pub expertise: ExpertiseReport,
    pub verdicts: usize,
    pub queue_length: usize,
}

/// State behind the review service: one dataset, one verdict log.
#[derive(Debug)]
pub struct ReviewSession {
    config: RunConfig,
    prepared: Prepared,
    calibration: CalibrationSet,
    log: VerdictLog,
    verdicts: Vec<Verdict>,
    current: Calibrated,
}

impl ReviewSession {
    /// Requires a completed run (its manifest) in the output directory.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = config.output_dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::InvalidConfig(format!(
                "{} has no completed run; run the pipeline first",
                config.output_dir.display()
            )));
        }
        let prepared = prepare(&config)?;
        let calibration = CalibrationSet::first_n(&prepared.universe, config.calibration_size)?;
        let log = VerdictLog::new(config.verdict_log_path());
        let (verdicts, _) = load_verdicts(log.path(), &prepared.vocab)?;
        let current = calibrate_and_renovate(
            &prepared.matrix,
            prepared.vocab.len(),
            &prepared.originals,
            &with_verdicts(&calibration, &verdicts),
            config.vote_threshold,
            &config.aggregation,
        )?;
        Ok(Self {
            config,
            prepared,
            calibration,
            log,
            verdicts,
            current,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.prepared.vocab
    }

    pub fn current(&self) -> &Calibrated {
        &self.current
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn queue(&self) -> Vec<QueueItem> {
        review_queue(&self.calibration, &self.current.renovation, &self.verdicts)
    }

    pub fn item(&self, image_id: &str) -> Result<ItemView> {
        let i = self.prepared.matrix.require_image(image_id)?;
        let vocab = &self.prepared.vocab;
        let soft = &self.current.renovation.soft_labels[i];
        let line = soft.to_line(vocab);
        let mut support: Vec<(LabelId, f64)> = self.current.renovation.support.scores[i]
            .iter()
            .filter(|(_, s)| **s > 0.0)
            .map(|(l, s)| (*l, *s))
            .collect();
        support.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let matrix = &self.prepared.matrix;
        let predictions = matrix
            .methods()
            .iter()
            .enumerate()
            .map(|(m, name)| (name.clone(), vocab.names(matrix.labels(i, m))))
            .collect();
        let verdict = latest_verdicts(&self.verdicts)
            .get(image_id)
            .map(|v| vocab.names(&v.labels));
        Ok(ItemView {
            image_id: image_id.to_string(),
            image_url: format!("/images/{image_id}"),
            original: line.original,
            diagnosis: soft.diagnosis,
            in_calibration: self.calibration.contains(image_id),
            labels: line.labels,
            support: support
                .into_iter()
                .map(|(l, s)| (vocab.name(l).to_string(), s))
                .collect(),
            predictions,
            verdict,
            margin: self.current.renovation.margins()[i],
        })
    }

    /// Validates and appends a verdict. Soft labels change only on recompute.
    pub fn submit(&mut self, submission: VerdictSubmission) -> Result<VerdictRecord> {
        self.prepared.matrix.require_image(&submission.image_id)?;
        if submission.reviewer.trim().is_empty() {
            return Err(Error::InvalidConfig("reviewer is empty".into()));
        }
        let vocab = &self.prepared.vocab;
        let labels: LabelSet = submission
            .labels
            .iter()
            .map(|l| vocab.require(l))
            .collect::<Result<_>>()?;
        let timestamp = submission
            .timestamp
            .unwrap_or_else(|| Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true));
        let context = if self.calibration.contains(&submission.image_id) {
            VerdictContext::Calibration
        } else {
            VerdictContext::Flagged
        };
        let record = VerdictRecord {
            image_id: submission.image_id,
            labels: vocab.names(&labels),
            reviewer: submission.reviewer,
            timestamp,
            context,
        };
        let (labels, at) = validate_verdict(&record, vocab)?;
        self.log.append(&record)?;
        self.verdicts.push(Verdict {
            line: self.verdicts.len() + 1,
            record: record.clone(),
            labels,
            at,
        });
        Ok(record)
    }

    /// Replays the verdict log from disk and re-runs expertise and aggregation.
    pub fn recompute(&mut self) -> Result<RecomputeSummary> {
        let (verdicts, skipped) = load_verdicts(self.log.path(), &self.prepared.vocab)?;
        let calibration = with_verdicts(&self.calibration, &verdicts);
        let next = calibrate_and_renovate(
            &self.prepared.matrix,
            self.prepared.vocab.len(),
            &self.prepared.originals,
            &calibration,
            self.config.vote_threshold,
            &self.config.aggregation,
        )?;
        let before: BTreeMap<&str, f64> = self
            .current
            .estimates
            .iter()
            .map(|e| (e.method.as_str(), e.est_acc))
            .collect();
        let estimates = next
            .estimates
            .iter()
            .map(|e| EstimateDelta {
                method: e.method.clone(),
                before: before.get(e.method.as_str()).copied().unwrap_or(0.0),
                after: e.est_acc,
            })
            .collect();
        let changed_images = self
            .current
            .renovation
            .soft_labels
            .iter()
            .zip(&next.renovation.soft_labels)
            .filter(|(a, b)| a.label_set() != b.label_set() || a.diagnosis != b.diagnosis)
            .count();
        let summary = RecomputeSummary {
            verdicts_applied: calibration.verified.len(),
            skipped_log_lines: skipped.len(),
            full_score_before: self.current.renovation.report.full_score,
            full_score_after: next.renovation.report.full_score,
            estimates,
            changed_images,
        };
        self.verdicts = verdicts;
        self.current = next;
        Ok(summary)
    }

    pub fn report(&self) -> ReportView {
        ReportView {
            report: self.current.renovation.report.clone(),
            expertise: expertise_report(&self.prepared.matrix, &self.current),
            verdicts: self.verdicts.len(),
            queue_length: self.queue().len(),
        }
    }

    /// Path of the image file for `image_id` inside the image directory,
    /// trying common extensions. `None` for unknown images.
    pub fn image_path(&self, image_id: &str) -> Option<PathBuf> {
        let dir = self.config.image_dir.as_ref()?;
        self.prepared.matrix.image_index(image_id)?;
        if image_id.contains(['/', '\\']) || image_id.starts_with('.') {
            return None;
        }
        let exact = dir.join(image_id);
        if exact.is_file() {
            return Some(exact);
        }
        ["png", "jpg", "jpeg", "webp", "gif", "bmp"]
            .iter()
            .map(|ext| dir.join(format!("{image_id}.{ext}")))
            .find(|p| p.is_file())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::new("t", vec!["cat".into(), "dog".into(), "fox".into()]).unwrap()
    }

    fn record(image: &str, labels: &[&str], ts: &str) -> String {
        serde_json::to_string(&VerdictRecord {
            image_id: image.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            reviewer: "r".into(),
            timestamp: ts.into(),
            context: VerdictContext::Calibration,
        })
        .unwrap()
    }

    fn pseudo() -> PseudoGroundTruth {
        PseudoGroundTruth {
            images: vec!["img1".into(), "img2".into()],
            sets: vec![LabelSet::from([LabelId(0)]), LabelSet::from([LabelId(1)])],
            k: 1,
            methods: 2,
        }
    }

    fn calibration() -> CalibrationSet {
        CalibrationSet::first_n(&["img1".to_string(), "img2".to_string()], 2).unwrap()
    }

    #[test]
    fn later_verdict_wins() {
        let log = [
            record("img1", &["dog"], "2024-01-01T10:00:00Z"),
            record("img1", &["fox"], "2024-01-01T11:00:00Z"),
        ]
        .join("\n");
        let (verdicts, skipped) = parse_verdicts(&log, &vocab());
        assert!(skipped.is_empty());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert_eq!(gt.sets[0], LabelSet::from([LabelId(2)]));
        assert_eq!(gt.sets[1], LabelSet::from([LabelId(1)]));
    }

    #[test]
    fn timestamp_not_line_order_decides() {
        let log = [
            record("img1", &["fox"], "2024-01-01T11:00:00Z"),
            record("img1", &["dog"], "2024-01-01T10:00:00Z"),
        ]
        .join("\n");
        let (verdicts, _) = parse_verdicts(&log, &vocab());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert_eq!(gt.sets[0], LabelSet::from([LabelId(2)]));
    }

    #[test]
    fn equal_timestamps_go_to_the_later_line() {
        let log = [
            record("img1", &["fox"], "2024-01-01T11:00:00Z"),
            record("img1", &["dog"], "2024-01-01T12:00:00+01:00"),
        ]
        .join("\n");
        let (verdicts, _) = parse_verdicts(&log, &vocab());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert_eq!(gt.sets[0], LabelSet::from([LabelId(1)]));
    }

    #[test]
    fn empty_log_keeps_pseudo_ground_truth() {
        let (verdicts, _) = parse_verdicts("", &vocab());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert_eq!(gt.sets, pseudo().sets);
    }

    #[test]
    fn empty_verdict_overrides_to_empty_set() {
        let (verdicts, _) = parse_verdicts(&record("img2", &[], "2024-01-01T10:00:00Z"), &vocab());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert!(gt.sets[1].is_empty());
    }

    #[test]
    fn corrupt_lines_are_skipped() {
        let log = [
            "{not json".to_string(),
            record("img1", &["wolf"], "2024-01-01T10:00:00Z"),
            record("img1", &["dog"], "yesterday"),
            record("img1", &["dog"], "2024-01-01T10:00:00Z"),
        ]
        .join("\n");
        let (verdicts, skipped) = parse_verdicts(&log, &vocab());
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].line, 4);
        assert_eq!(skipped.iter().map(|e| e.line).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn verdicts_outside_calibration_do_not_touch_ground_truth() {
        let (verdicts, _) = parse_verdicts(&record("img9", &["fox"], "2024-01-01T10:00:00Z"), &vocab());
        let gt = apply_verdicts(&verdicts, &pseudo(), &calibration());
        assert_eq!(gt.sets, pseudo().sets);
    }

    #[test]
    fn replaying_the_log_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = VerdictLog::new(dir.path().join("v.jsonl"));
        let rec = VerdictRecord {
            image_id: "img1".into(),
            labels: vec!["fox".into()],
            reviewer: "r".into(),
            timestamp: "2024-01-01T10:00:00Z".into(),
            context: VerdictContext::Calibration,
        };
        log.append(&rec).unwrap();
        log.append(&rec).unwrap();
        let (a, _) = load_verdicts(log.path(), &vocab()).unwrap();
        let (b, _) = load_verdicts(log.path(), &vocab()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(
            apply_verdicts(&a, &pseudo(), &calibration()),
            apply_verdicts(&b, &pseudo(), &calibration())
        );
    }

    #[test]
    fn missing_log_is_empty() {
        let (v, s) = load_verdicts(Path::new("/nonexistent/verdicts.jsonl"), &vocab()).unwrap();
        assert!(v.is_empty() && s.is_empty());
    }

    #[test]
    fn toml_and_json_configs_agree() {
        let json = r#"{
            "dataset_id": "d", "vocabulary": "v.json", "universe": "u.txt",
            "predictions": [{"path": "p.jsonl", "method": "blip", "score_filter": {"threshold": 0.15, "top_t": 3}}],
            "aggregation": {"threshold": 0.9, "threshold_mode": "fraction_of_full_score", "top_k": 3},
            "output_dir": "out"
        }"#;
        let toml = r#"
            dataset_id = "d"
            vocabulary = "v.json"
            universe = "u.txt"
            output_dir = "out"
            [[predictions]]
            path = "p.jsonl"
            method = "blip"
            score_filter = { threshold = 0.15, top_t = 3 }
            [aggregation]
            threshold = 0.9
            threshold_mode = "fraction_of_full_score"
            top_k = 3
        "#;
        let a = RunConfig::parse(json, false, "json").unwrap();
        let b = RunConfig::parse(toml, true, "toml").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.calibration_size, DEFAULT_CALIBRATION_SIZE);
        assert_eq!(a.origin_method, "origin");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let json = r#"{"dataset_id": "d", "vocabulary": "v", "universe": "u", "predictions": [],
            "aggregation": {"threshold": 0.9, "top_k": 3}, "output_dir": "o", "treshold": 1}"#;
        assert!(RunConfig::parse(json, false, "json").is_err());
    }
}
