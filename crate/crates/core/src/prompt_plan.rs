//! Label batching and prompt rendering for multi-label elicitation, plus the
//! recall / output-length measurements used to pick a batch size.

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelSet, LabelVocabulary};

const PREAMBLE: &str = include_str!("../templates/preamble.txt");
const BINARY_TEMPLATE: &str = include_str!("../templates/binary.txt");
const DIRECT_TEMPLATE: &str = include_str!("../templates/direct.txt");
const BATCHED_TEMPLATE: &str = include_str!("../templates/batched.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// One yes/no question per label.
    Binary,
    /// One prompt listing every label.
    Direct,
    /// One prompt per shuffled label batch.
    Batched,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::Binary => "binary",
            TemplateKind::Direct => "direct",
            TemplateKind::Batched => "batched",
        })
    }
}

impl std::str::FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TemplateKind::Binary),
            "direct" => Ok(TemplateKind::Direct),
            "batched" => Ok(TemplateKind::Batched),
            other => Err(Error::InvalidConfig(format!("unknown template kind {other:?}"))),
        }
    }
}

/// A shuffled partition of the vocabulary into prompt-sized batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub dataset_id: String,
    pub template_kind: TemplateKind,
    pub batch_size: usize,
    pub seed: u64,
    pub batches: Vec<Vec<String>>,
}

impl PromptPlan {
    /// Prompts each image needs: |vocab| for binary, 1 for direct, one per
    /// batch otherwise. Equal to the batch count in every case.
    pub fn prompts_per_image(&self) -> usize {
        self.batches.len()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plans serialize");
        text.push('\n');
        text
    }
}

/// Seeded Fisher–Yates shuffle over ChaCha20 (`seed_from_u64`). Index `j`
/// for position `i` is `next_u64() % (i + 1)`, walking `i` from the end,
/// so other implementations can reproduce a plan from its seed.
pub fn seeded_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Batched plan: the vocabulary is shuffled by `seed`, then cut into
/// consecutive chunks of `batch_size` (the last one may be shorter).
pub fn plan_batches(vocab: &LabelVocabulary, batch_size: usize, seed: u64) -> Result<PromptPlan> {
    plan(vocab, TemplateKind::Batched, batch_size, seed)
}

/// Plan for any template kind. Binary plans use singleton batches and
/// direct plans a single batch, whatever `batch_size` says.
pub fn plan(vocab: &LabelVocabulary, kind: TemplateKind, batch_size: usize, seed: u64) -> Result<PromptPlan> {
    let batch_size = match kind {
        TemplateKind::Binary => 1,
        TemplateKind::Direct => vocab.len(),
        TemplateKind::Batched => batch_size,
    };
    if batch_size == 0 || batch_size > vocab.len() {
        return Err(Error::BatchSizeOutOfRange {
            batch_size,
            vocab_size: vocab.len(),
        });
    }
    let shuffled: Vec<String> = seeded_permutation(vocab.len(), seed)
        .into_iter()
        .map(|i| vocab.labels()[i].clone())
        .collect();
    Ok(PromptPlan {
        dataset_id: vocab.dataset_id().to_string(),
        template_kind: kind,
        batch_size,
        seed,
        batches: shuffled.chunks(batch_size).map(<[String]>::to_vec).collect(),
    })
}

/// Full prompt text for one image and one batch.
pub fn render_prompt(plan: &PromptPlan, batch_index: usize, image_ref: &str) -> Result<String> {
    let batch = plan.batches.get(batch_index).ok_or(Error::BatchIndexOutOfRange {
        index: batch_index,
        batches: plan.batches.len(),
    })?;
    let body = match plan.template_kind {
        TemplateKind::Binary => BINARY_TEMPLATE.replace("{label}", &batch[0]),
        TemplateKind::Direct => DIRECT_TEMPLATE.replace("{labels}", &batch.join(", ")),
        TemplateKind::Batched => BATCHED_TEMPLATE.replace("{labels}", &batch.join(", ")),
    };
    Ok(format!("<image>{image_ref}</image>\n{PREAMBLE}\n{body}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptEvalResult {
    pub recall: f64,
    pub mean_output_length: f64,
    pub wall_time_seconds: f64,
}

/// Micro-averaged recall `Σ|pred ∩ ref| / Σ|ref|` and mean prediction size
/// over the images in `references`. Images without predictions count as
/// empty predictions.
pub fn evaluate_responses(
    predictions: &BTreeMap<String, LabelSet>,
    references: &BTreeMap<String, LabelSet>,
    wall_time_seconds: f64,
) -> Result<PromptEvalResult> {
    if references.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let empty = LabelSet::new();
    let mut hits = 0usize;
    let mut reference_total = 0usize;
    let mut predicted_total = 0usize;
    for (image, reference) in references {
        let predicted = predictions.get(image).unwrap_or(&empty);
        hits += predicted.intersection(reference).count();
        reference_total += reference.len();
        predicted_total += predicted.len();
    }
    if reference_total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(PromptEvalResult {
        recall: hits as f64 / reference_total as f64,
        mean_output_length: predicted_total as f64 / references.len() as f64,
        wall_time_seconds,
    })
}
