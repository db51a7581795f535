//! Agreement with crowd annotations, per-method label distributions, and
//! pairwise confusion between methods.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::PredictionMatrix;
use crate::label_space::{LabelId, LabelSet, LabelVocabulary};

/// The four outcomes a crowd worker could vote for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementCase {
    Given,
    Guessed,
    Both,
    Neither,
}

/// Vote counts per outcome.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub given: u32,
    pub guessed: u32,
    pub both: u32,
    pub neither: u32,
}

/// On-disk MTurk line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MTurkLine {
    pub image_id: String,
    pub given: String,
    pub guessed: String,
    pub counts: CaseCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MTurkRecord {
    pub image_id: String,
    pub given_label: LabelId,
    pub guessed_label: LabelId,
    pub counts: CaseCounts,
}

impl MTurkRecord {
    pub fn new(
        image_id: impl Into<String>,
        given_label: LabelId,
        guessed_label: LabelId,
        counts: CaseCounts,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if given_label == guessed_label {
            return Err(Error::Parse {
                context: format!("mturk record {image_id}"),
                message: "given and guessed labels are identical".into(),
            });
        }
        if counts == CaseCounts::default() {
            return Err(Error::Parse {
                context: format!("mturk record {image_id}"),
                message: "all vote counts are zero".into(),
            });
        }
        Ok(Self {
            image_id,
            given_label,
            guessed_label,
            counts,
        })
    }

    pub fn from_line(line: MTurkLine, vocab: &LabelVocabulary) -> Result<Self> {
        let given = vocab.require(&line.given)?;
        let guessed = vocab.require(&line.guessed)?;
        Self::new(line.image_id, given, guessed, line.counts)
    }
}

pub fn parse_mturk(reader: impl BufRead, vocab: &LabelVocabulary) -> Result<Vec<MTurkRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let context = format!("mturk line {}", i + 1);
        let text = line.map_err(|e| Error::Parse {
            context: context.clone(),
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: MTurkLine = serde_json::from_str(&text).map_err(|e| Error::json(context, e))?;
        records.push(MTurkRecord::from_line(raw, vocab)?);
    }
    Ok(records)
}

/// Majority outcome of a record. Ties go to the first of
/// both, given, guessed, neither.
pub fn consensus_case(record: &MTurkRecord) -> AgreementCase {
    let c = record.counts;
    [
        (AgreementCase::Both, c.both),
        (AgreementCase::Given, c.given),
        (AgreementCase::Guessed, c.guessed),
        (AgreementCase::Neither, c.neither),
    ]
    .into_iter()
    .fold(
        (AgreementCase::Both, c.both),
        |best, cur| if cur.1 > best.1 { cur } else { best },
    )
    .0
}

pub fn agrees(predicted: &LabelSet, record: &MTurkRecord, case: AgreementCase) -> bool {
    let has_given = predicted.contains(&record.given_label);
    let has_guessed = predicted.contains(&record.guessed_label);
    match case {
        AgreementCase::Given => has_given,
        AgreementCase::Guessed => has_guessed,
        AgreementCase::Both => has_given && has_guessed,
        AgreementCase::Neither => !has_given && !has_guessed,
    }
}

/// Fraction of records whose consensus condition the predictions satisfy.
pub fn agreement_rate(predictions: &BTreeMap<String, LabelSet>, records: &[MTurkRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut agreed = 0usize;
    for record in records {
        let predicted = predictions
            .get(&record.image_id)
            .ok_or_else(|| Error::UnknownImage(record.image_id.clone()))?;
        if agrees(predicted, record, consensus_case(record)) {
            agreed += 1;
        }
    }
    Ok(agreed as f64 / records.len() as f64)
}

/// How often a method predicts each label, over all images.
pub fn label_distribution(matrix: &PredictionMatrix, method: &str, vocab: &LabelVocabulary) -> Result<Vec<u64>> {
    let m = matrix.require_method(method)?;
    let mut counts = vec![0u64; vocab.len()];
    for image in 0..matrix.images().len() {
        for label in matrix.labels(image, m) {
            counts[label.index()] += 1;
        }
    }
    Ok(counts)
}

/// Counts of (primary label of `row_method`, primary label of
/// `col_method`) over images where both predicted something.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub row_method: String,
    pub col_method: String,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.counts.len();
        let counts = (0..n).map(|c| (0..n).map(|r| self.counts[r][c]).collect()).collect();
        Self {
            row_method: self.col_method.clone(),
            col_method: self.row_method.clone(),
            counts,
        }
    }

    /// CSV grid: header row and first column hold label names.
    pub fn to_csv(&self, vocab: &LabelVocabulary) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let corner = format!("{}\\{}", self.row_method, self.col_method);
        let header = std::iter::once(corner.as_str()).chain(vocab.labels().iter().map(String::as_str));
        w.write_record(header).map_err(csv_err)?;
        for (label, row) in vocab.labels().iter().zip(&self.counts) {
            let cells = std::iter::once(label.clone()).chain(row.iter().map(u64::to_string));
            w.write_record(cells).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        context: "csv".into(),
        message: e.to_string(),
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        context: "csv".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Distribution table as CSV: one row per label, one column per method.
pub fn distribution_csv(vocab: &LabelVocabulary, columns: &[(String, Vec<u64>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("label").chain(columns.iter().map(|(m, _)| m.as_str()));
    w.write_record(header).map_err(csv_err)?;
    for (i, label) in vocab.labels().iter().enumerate() {
        let cells = std::iter::once(label.clone()).chain(columns.iter().map(|(_, c)| c[i].to_string()));
        w.write_record(cells).map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn pairwise_confusion(
    matrix: &PredictionMatrix,
    row_method: &str,
    col_method: &str,
    vocab: &LabelVocabulary,
) -> Result<ConfusionMatrix> {
    let a = matrix.require_method(row_method)?;
    let b = matrix.require_method(col_method)?;
    let n = vocab.len();
    let mut counts = vec![vec![0u64; n]; n];
    for image in 0..matrix.images().len() {
        if let (Some(r), Some(c)) = (matrix.cell(image, a).primary(), matrix.cell(image, b).primary()) {
            counts[r.index()][c.index()] += 1;
        }
    }
    Ok(ConfusionMatrix {
        row_method: row_method.to_string(),
        col_method: col_method.to_string(),
        counts,
    })
}
