//! Label vocabularies, canonical label forms, and sanitization of raw model
//! responses.
//!
//! Model responses drift from the candidate list in a few recurring ways:
//! generic names instead of the fine-grained candidate ("snake" for
//! "sea snake"), the same label repeated until the generation budget runs
//! out, and a literal `None` when nothing applies. Sanitization maps a raw
//! response onto the vocabulary and records what it had to throw away.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a label in its vocabulary. Ordering follows vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelId(pub u32);

impl LabelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A set of labels, iterated in vocabulary order.
pub type LabelSet = BTreeSet<LabelId>;

/// Lowercase, trimmed, single-spaced form of a label string.
pub fn canonical_form(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// On-disk vocabulary layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub dataset_id: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<BTreeMap<String, String>>,
}

/// The ordered candidate label set of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    dataset_id: String,
    labels: Vec<String>,
    index: HashMap<String, LabelId>,
    synonyms: BTreeMap<String, LabelId>,
}

impl LabelVocabulary {
    pub fn new(dataset_id: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        Self::with_synonyms(dataset_id, labels, BTreeMap::new())
    }

    pub fn with_synonyms(
        dataset_id: impl Into<String>,
        labels: Vec<String>,
        synonyms: BTreeMap<String, String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidVocabulary("label list is empty".into()));
        }
        if labels.len() > u32::MAX as usize {
            return Err(Error::InvalidVocabulary("too many labels".into()));
        }
        let mut canonical = Vec::with_capacity(labels.len());
        let mut index = HashMap::with_capacity(labels.len());
        for (i, raw) in labels.iter().enumerate() {
            let form = canonical_form(raw);
            if form.is_empty() {
                return Err(Error::InvalidVocabulary(format!("label {i} is blank")));
            }
            if index.insert(form.clone(), LabelId(i as u32)).is_some() {
                return Err(Error::InvalidVocabulary(format!(
                    "label {form:?} appears more than once after canonicalization"
                )));
            }
            canonical.push(form);
        }
        let mut synonym_ids = BTreeMap::new();
        for (key, target) in synonyms {
            let target_form = canonical_form(&target);
            let id = *index.get(&target_form).ok_or_else(|| {
                Error::InvalidVocabulary(format!("synonym {key:?} points at {target:?}, which is not a label"))
            })?;
            synonym_ids.insert(canonical_form(&key), id);
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            labels: canonical,
            index,
            synonyms: synonym_ids,
        })
    }

    pub fn from_file_contents(file: VocabularyFile) -> Result<Self> {
        Self::with_synonyms(file.dataset_id, file.labels, file.synonyms.unwrap_or_default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabularyFile =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("vocabulary {}", path.display()), e))?;
        Self::from_file_contents(file)
    }

    pub fn to_file_contents(&self) -> VocabularyFile {
        let synonyms = if self.synonyms.is_empty() {
            None
        } else {
            Some(
                self.synonyms
                    .iter()
                    .map(|(k, id)| (k.clone(), self.name(*id).to_string()))
                    .collect(),
            )
        };
        VocabularyFile {
            dataset_id: self.dataset_id.clone(),
            labels: self.labels.clone(),
            synonyms,
        }
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ids(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.labels.len() as u32).map(LabelId)
    }

    /// Canonical name of a label. Panics if the id does not belong to this vocabulary.
    pub fn name(&self, id: LabelId) -> &str {
        &self.labels[id.index()]
    }

    pub fn contains(&self, id: LabelId) -> bool {
        id.index() < self.labels.len()
    }

    /// Resolves a raw string to a vocabulary label: exact canonical match
    /// first, then the synonym map. Never guesses.
    pub fn canonicalize(&self, raw: &str) -> Option<LabelId> {
        let form = canonical_form(raw);
        self.index.get(&form).or_else(|| self.synonyms.get(&form)).copied()
    }

    /// Like [`canonicalize`](Self::canonicalize) but an absent label is an error.
    pub fn require(&self, raw: &str) -> Result<LabelId> {
        self.canonicalize(raw)
            .ok_or_else(|| Error::OutOfVocabulary(raw.to_string()))
    }

    pub fn names<'a>(&'a self, ids: impl IntoIterator<Item = &'a LabelId>) -> Vec<String> {
        ids.into_iter().map(|id| self.name(*id).to_string()).collect()
    }
}

/// What sanitization kept and what it discarded for one response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizationReport {
    pub accepted: Vec<LabelId>,
    pub rejected_out_of_vocab: Vec<String>,
    pub duplicates_removed: usize,
    pub truncated: bool,
    pub was_null: bool,
}

impl SanitizationReport {
    pub fn is_clean(&self) -> bool {
        self.rejected_out_of_vocab.is_empty() && self.duplicates_removed == 0 && !self.truncated && !self.was_null
    }
}

/// Maps a raw label list onto the vocabulary.
///
/// Out-of-vocabulary strings are dropped and recorded, repeats keep their
/// first occurrence, and the accepted list is cut to `cap` entries. A sole
/// `None` entry (any case) is an explicit abstention, unless the vocabulary
/// itself has a label called "none".
pub fn sanitize_response(raw_labels: &[impl AsRef<str>], vocab: &LabelVocabulary, cap: usize) -> SanitizationReport {
    let cap = cap.max(1);
    let mut report = SanitizationReport::default();

    if let [only] = raw_labels {
        if canonical_form(only.as_ref()) == "none" && vocab.canonicalize("none").is_none() {
            report.was_null = true;
            return report;
        }
    }

    let mut seen = BTreeSet::new();
    for raw in raw_labels {
        let raw = raw.as_ref();
        match vocab.canonicalize(raw) {
            None => report.rejected_out_of_vocab.push(raw.to_string()),
            Some(id) if !seen.insert(id) => report.duplicates_removed += 1,
            Some(id) => report.accepted.push(id),
        }
    }
    if report.accepted.len() > cap {
        report.accepted.truncate(cap);
        report.truncated = true;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(labels: &[&str]) -> LabelVocabulary {
        LabelVocabulary::new("t", labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn canonicalize_normalizes_case_and_whitespace() {
        let v = vocab(&["sea snake", "garter snake"]);
        assert_eq!(v.canonicalize("Sea Snake "), Some(LabelId(0)));
        assert_eq!(v.canonicalize("  GARTER\t  snake"), Some(LabelId(1)));
    }

    #[test]
    fn canonicalize_rejects_generic_term() {
        let v = vocab(&["sea snake", "garter snake"]);
        assert_eq!(v.canonicalize("snake"), None);
    }

    #[test]
    fn canonicalize_uses_synonyms() {
        let v = LabelVocabulary::with_synonyms(
            "t",
            vec!["sea snake".into(), "garter snake".into()],
            BTreeMap::from([("snake".to_string(), "sea snake".to_string())]),
        )
        .unwrap();
        assert_eq!(v.canonicalize("Snake"), Some(LabelId(0)));
        assert_eq!(v.name(LabelId(0)), "sea snake");
    }

    #[test]
    fn vocabulary_validation() {
        assert!(LabelVocabulary::new("t", vec![]).is_err());
        assert!(LabelVocabulary::new("t", vec!["Cat".into(), "cat ".into()]).is_err());
        assert!(LabelVocabulary::new("t", vec!["cat".into(), "  ".into()]).is_err());
        let bad_synonym = LabelVocabulary::with_synonyms(
            "t",
            vec!["cat".into()],
            BTreeMap::from([("kitty".to_string(), "lion".to_string())]),
        );
        assert!(matches!(bad_synonym, Err(Error::InvalidVocabulary(_))));
    }

    #[test]
    fn repeated_labels_collapse() {
        let v = vocab(&["baby crib", "cradle"]);
        let r = sanitize_response(&["baby crib", "baby crib", "baby crib"], &v, 5);
        assert_eq!(r.accepted, vec![LabelId(0)]);
        assert_eq!(r.duplicates_removed, 2);
        assert!(!r.truncated);
    }

    #[test]
    fn none_response_is_null() {
        let v = vocab(&["cat", "dog"]);
        let r = sanitize_response(&["None"], &v, 5);
        assert!(r.was_null);
        assert!(r.accepted.is_empty());
        assert!(r.rejected_out_of_vocab.is_empty());

        // "None" alongside real labels is just an out-of-vocabulary string.
        let r = sanitize_response(&["cat", "none"], &v, 5);
        assert!(!r.was_null);
        assert_eq!(r.accepted, vec![LabelId(0)]);
        assert_eq!(r.rejected_out_of_vocab, vec!["none".to_string()]);
    }

    #[test]
    fn none_is_a_label_when_the_vocabulary_says_so() {
        let v = vocab(&["none", "cat"]);
        let r = sanitize_response(&["None"], &v, 5);
        assert!(!r.was_null);
        assert_eq!(r.accepted, vec![LabelId(0)]);
    }

    #[test]
    fn out_of_vocab_dropped() {
        let v = vocab(&["cat", "dog", "bird"]);
        let r = sanitize_response(&["cat", "unicorn", "dog"], &v, 5);
        assert_eq!(r.accepted, vec![LabelId(0), LabelId(1)]);
        assert_eq!(r.rejected_out_of_vocab, vec!["unicorn".to_string()]);
    }

    #[test]
    fn cap_truncates() {
        let v = vocab(&["a", "b", "c", "d"]);
        let r = sanitize_response(&["d", "c", "b", "a"], &v, 2);
        assert_eq!(r.accepted, vec![LabelId(3), LabelId(2)]);
        assert!(r.truncated);
    }

    fn arb_vocab_and_raw() -> impl Strategy<Value = (Vec<String>, Vec<String>, usize)> {
        let pool = vec!["cat", "Dog", "sea snake", "bird", "frog", "unicorn", "SNAKE", " cat "];
        (
            proptest::sample::subsequence(vec!["cat", "dog", "sea snake", "bird", "frog"], 1..=5),
            proptest::collection::vec(proptest::sample::select(pool), 0..12),
            1usize..6,
        )
            .prop_map(|(v, raw, cap)| {
                (
                    v.into_iter().map(String::from).collect(),
                    raw.into_iter().map(String::from).collect(),
                    cap,
                )
            })
    }

    proptest! {
        #[test]
        fn sanitize_is_idempotent((labels, raw, cap) in arb_vocab_and_raw()) {
            let v = LabelVocabulary::new("p", labels).unwrap();
            let first = sanitize_response(&raw, &v, cap);
            let names = v.names(&first.accepted);
            let second = sanitize_response(&names, &v, cap);
            prop_assert_eq!(&second.accepted, &first.accepted);
            prop_assert!(second.is_clean() || first.accepted.is_empty());
            prop_assert!(first.accepted.len() <= cap.min(v.len()));
            let unique: BTreeSet<_> = first.accepted.iter().collect();
            prop_assert_eq!(unique.len(), first.accepted.len());
        }

        #[test]
        fn canonicalize_is_a_projection(raw in "[ a-zA-Z]{0,12}") {
            let v = vocab(&["cat", "sea snake", "dog"]);
            if let Some(id) = v.canonicalize(&raw) {
                prop_assert_eq!(v.canonicalize(v.name(id)), Some(id));
            }
            let once = canonical_form(&raw);
            prop_assert_eq!(canonical_form(&once), once);
        }
    }
}
