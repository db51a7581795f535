//! Prediction files: parsing, score filtering, and merging into a
//! [`PredictionMatrix`].
//!
//! One predictions file is JSONL with one record per line:
//!
//! ```text
//! {"image_id": "img-0001", "method": "blip", "labels": ["cat"], "scores": {"cat": 0.61}, "raw": "..."}
//! ```
//!
//! `scores` and `raw` are optional. The dataset's original labels are
//! ingested the same way, as method `origin`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{sanitize_response, LabelId, LabelSet, LabelVocabulary, SanitizationReport};

/// Method id under which the dataset's own labels are ingested.
pub const ORIGIN_METHOD: &str = "origin";

/// One line of a predictions file, as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub method: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

/// A sanitized prediction of one method for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub method: String,
    pub labels: Vec<LabelId>,
    pub scores: Option<BTreeMap<LabelId, f64>>,
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLine {
    pub line: usize,
    pub record: PredictionRecord,
    pub report: SanitizationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Outcome of parsing one predictions file. Line numbers are 1-based.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedPredictions {
    pub records: Vec<ParsedLine>,
    pub errors: Vec<LineError>,
    /// Every method id seen in the file. Methods are open-world.
    pub methods: BTreeSet<String>,
}

impl ParsedPredictions {
    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records.into_iter().map(|p| p.record).collect()
    }
}

fn parse_line(
    text: &str,
    vocab: &LabelVocabulary,
    cap: usize,
) -> Result<(PredictionRecord, SanitizationReport), String> {
    let line: PredictionLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if line.image_id.trim().is_empty() {
        return Err("empty image_id".into());
    }
    if line.method.trim().is_empty() {
        return Err("empty method".into());
    }
    let report = sanitize_response(&line.labels, vocab, cap);
    let scores = match line.scores {
        None => None,
        Some(raw_scores) => {
            let mut scores = BTreeMap::new();
            for (name, score) in raw_scores {
                if !score.is_finite() || !(0.0..=1.0).contains(&score) {
                    return Err(format!("score for {name:?} is {score}, outside [0, 1]"));
                }
                // Scores for labels outside the vocabulary carry no information here.
                if let Some(id) = vocab.canonicalize(&name) {
                    scores.entry(id).or_insert(score);
                }
            }
            Some(scores)
        }
    };
    Ok((
        PredictionRecord {
            image_id: line.image_id,
            method: line.method,
            labels: report.accepted.clone(),
            scores,
            raw_response: line.raw,
        },
        report,
    ))
}

/// Parses a predictions stream. Malformed lines are collected with their
/// line numbers; if more than half of the non-blank lines are malformed the
/// whole file is refused, since that usually means the wrong file.
pub fn parse_predictions(
    reader: impl BufRead,
    vocab: &LabelVocabulary,
    cap: usize,
    source: &str,
) -> Result<ParsedPredictions> {
    let mut parsed = ParsedPredictions::default();
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = match line {
            Ok(text) => text,
            Err(e) => {
                total += 1;
                parsed.errors.push(LineError {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if text.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&text, vocab, cap) {
            Ok((record, report)) => {
                parsed.methods.insert(record.method.clone());
                parsed.records.push(ParsedLine {
                    line: line_no,
                    record,
                    report,
                });
            }
            Err(message) => parsed.errors.push(LineError { line: line_no, message }),
        }
    }
    if parsed.errors.len() * 2 > total {
        let first = &parsed.errors[0];
        return Err(Error::MostlyMalformed {
            path: source.to_string(),
            malformed: parsed.errors.len(),
            total,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    Ok(parsed)
}

pub fn parse_predictions_file(path: &Path, vocab: &LabelVocabulary, cap: usize) -> Result<ParsedPredictions> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(std::io::BufReader::new(file), vocab, cap, &path.display().to_string())
}

/// Threshold and top-t settings for score-typed methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreFilterConfig {
    pub threshold: f64,
    pub top_t: usize,
}

impl ScoreFilterConfig {
    pub fn new(threshold: f64, top_t: usize) -> Result<Self> {
        let cfg = Self { threshold, top_t };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidConfig(format!(
                "score threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.top_t == 0 {
            return Err(Error::InvalidConfig("top_t must be at least 1".into()));
        }
        Ok(())
    }
}

/// Keeps labels scoring at least `threshold`, then the `top_t` best of
/// those. Scores are compared as given, without renormalization. Ties at
/// the cut break by vocabulary order.
///
/// Candidates are the record's labels, or every scored label when the
/// record lists none (a scorer that emits a full distribution).
pub fn filter_scored(record: &PredictionRecord, cfg: &ScoreFilterConfig) -> Result<PredictionRecord> {
    let empty = BTreeMap::new();
    let scores = record.scores.as_ref().unwrap_or(&empty);
    let candidates: Vec<LabelId> = if record.labels.is_empty() {
        scores.keys().copied().collect()
    } else {
        record.labels.clone()
    };

    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        let score = *scores.get(&id).ok_or_else(|| Error::MissingScore {
            image_id: record.image_id.clone(),
            label: id.to_string(),
        })?;
        if score >= cfg.threshold {
            scored.push((id, score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.top_t);

    Ok(PredictionRecord {
        image_id: record.image_id.clone(),
        method: record.method.clone(),
        labels: scored.iter().map(|(id, _)| *id).collect(),
        scores: Some(scored.into_iter().collect()),
        raw_response: record.raw_response.clone(),
    })
}

/// One (image, method) cell of the matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cell {
    pub labels: LabelSet,
    pub scores: Option<BTreeMap<LabelId, f64>>,
}

impl Cell {
    pub fn from_labels(labels: impl IntoIterator<Item = LabelId>) -> Self {
        Self {
            labels: labels.into_iter().collect(),
            scores: None,
        }
    }

    /// The single label this cell stands for: the best-scored label when
    /// scores exist, else the first in vocabulary order.
    pub fn primary(&self) -> Option<LabelId> {
        if let Some(scores) = &self.scores {
            let best = self
                .labels
                .iter()
                .filter_map(|id| scores.get(id).map(|s| (*id, *s)))
                .fold(None::<(LabelId, f64)>, |best, (id, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((id, s)),
                });
            if let Some((id, _)) = best {
                return Some(id);
            }
        }
        self.labels.iter().next().copied()
    }
}

/// Per-image, per-method label sets for one dataset. Every
/// (image, method) cell exists; an empty set means the method abstained.
///
/// Images keep universe order. Methods are kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    dataset_id: String,
    methods: Vec<String>,
    images: Vec<String>,
    image_index: HashMap<String, usize>,
    cells: Vec<Vec<Cell>>,
}

impl PredictionMatrix {
    /// An all-empty matrix. Duplicate images or methods are rejected.
    pub fn empty(dataset_id: impl Into<String>, methods: Vec<String>, images: Vec<String>) -> Result<Self> {
        let mut methods = methods;
        methods.sort();
        if let Some(w) = methods.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateMethod(w[0].clone()));
        }
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, id) in images.iter().enumerate() {
            if image_index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("image {id} listed twice in the universe")));
            }
        }
        let cells = vec![vec![Cell::default(); methods.len()]; images.len()];
        Ok(Self {
            dataset_id: dataset_id.into(),
            methods,
            images,
            image_index,
            cells,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn images(&self) -> &[String] {
        &self.images
    }

    pub fn method_index(&self, method: &str) -> Option<usize> {
        self.methods.binary_search_by(|m| m.as_str().cmp(method)).ok()
    }

    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.image_index.get(image_id).copied()
    }

    pub fn require_method(&self, method: &str) -> Result<usize> {
        self.method_index(method)
            .ok_or_else(|| Error::UnknownMethod(method.to_string()))
    }

    pub fn require_image(&self, image_id: &str) -> Result<usize> {
        self.image_index(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn cell(&self, image: usize, method: usize) -> &Cell {
        &self.cells[image][method]
    }

    pub fn labels(&self, image: usize, method: usize) -> &LabelSet {
        &self.cells[image][method].labels
    }

    pub fn set_cell(&mut self, image: usize, method: usize, cell: Cell) {
        self.cells[image][method] = cell;
    }

    /// Copy restricted to the given methods, which must all be present.
    pub fn select_methods(&self, methods: &[String]) -> Result<Self> {
        let idx: Vec<usize> = methods.iter().map(|m| self.require_method(m)).collect::<Result<_>>()?;
        let mut out = Self::empty(self.dataset_id.clone(), methods.to_vec(), self.images.clone())?;
        for (image, row) in self.cells.iter().enumerate() {
            for (m, &src) in methods.iter().zip(&idx) {
                let dst = out.method_index(m).expect("method just inserted");
                out.cells[image][dst] = row[src].clone();
            }
        }
        Ok(out)
    }

    /// Original label per image, read from a singleton-set method such as
    /// [`ORIGIN_METHOD`].
    pub fn originals(&self, method: &str) -> Result<Vec<LabelId>> {
        let m = self.require_method(method)?;
        self.cells
            .iter()
            .zip(&self.images)
            .map(|(row, image_id)| {
                let labels = &row[m].labels;
                match labels.len() {
                    1 => Ok(*labels.iter().next().unwrap()),
                    0 => Err(Error::MissingOriginal(image_id.clone())),
                    n => Err(Error::InvalidConfig(format!(
                        "method {method} gives {n} labels for image {image_id}, expected one original label"
                    ))),
                }
            })
            .collect()
    }

    /// Canonical JSONL form: one line per cell, sorted by (image_id, method),
    /// labels in vocabulary order.
    pub fn to_lines(&self, vocab: &LabelVocabulary) -> Vec<PredictionLine> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.sort_by(|a, b| self.images[*a].cmp(&self.images[*b]));
        let mut lines = Vec::with_capacity(order.len() * self.methods.len());
        for image in order {
            for (m, method) in self.methods.iter().enumerate() {
                let cell = &self.cells[image][m];
                lines.push(PredictionLine {
                    image_id: self.images[image].clone(),
                    method: method.clone(),
                    labels: vocab.names(&cell.labels),
                    scores: cell
                        .scores
                        .as_ref()
                        .map(|s| s.iter().map(|(id, v)| (vocab.name(*id).to_string(), *v)).collect()),
                    raw: None,
                });
            }
        }
        lines
    }

    pub fn to_jsonl(&self, vocab: &LabelVocabulary) -> String {
        let mut out = String::new();
        for line in self.to_lines(vocab) {
            out.push_str(&serde_json::to_string(&line).expect("prediction lines serialize"));
            out.push('\n');
        }
        out
    }
}

/// Folds records into a matrix over `image_universe`. Absent cells become
/// empty sets; two records for the same cell are an error. The result does
/// not depend on record order.
pub fn merge(dataset_id: &str, records: &[PredictionRecord], image_universe: &[String]) -> Result<PredictionMatrix> {
    let methods: BTreeSet<String> = records.iter().map(|r| r.method.clone()).collect();
    let mut matrix = PredictionMatrix::empty(dataset_id, methods.into_iter().collect(), image_universe.to_vec())?;
    let mut filled = vec![vec![false; matrix.methods.len()]; matrix.images.len()];
    for record in records {
        let image = matrix.require_image(&record.image_id)?;
        let method = matrix.method_index(&record.method).expect("method collected above");
        if std::mem::replace(&mut filled[image][method], true) {
            return Err(Error::DuplicateCell {
                image_id: record.image_id.clone(),
                method: record.method.clone(),
            });
        }
        matrix.cells[image][method] = Cell {
            labels: record.labels.iter().copied().collect(),
            scores: record.scores.clone(),
        };
    }
    Ok(matrix)
}

/// Reads a newline-delimited image universe. Blank lines are skipped.
pub fn read_universe(text: &str) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut images = Vec::new();
    for line in text.lines() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::InvalidConfig(format!("image {id} listed twice in the universe")));
        }
        images.push(id.to_string());
    }
    Ok(images)
}

pub fn load_universe(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_universe(&text)
}
