//! Pseudo ground truth on the calibration subset by thresholded vote
//! counting, with human verdicts overriding it image by image.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingestion::PredictionMatrix;
use crate::label_space::{LabelId, LabelSet};

/// Default number of calibration images.
pub const DEFAULT_CALIBRATION_SIZE: usize = 100;

/// Per-image vote counts over the calibration images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub images: Vec<String>,
    /// Only labels with at least one vote appear.
    pub votes: Vec<BTreeMap<LabelId, usize>>,
    pub methods: usize,
}

impl VoteTally {
    pub fn vote(&self, image: usize, label: LabelId) -> usize {
        self.votes[image].get(&label).copied().unwrap_or(0)
    }
}

/// Labels with at least `k` votes, per calibration image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoGroundTruth {
    pub images: Vec<String>,
    pub sets: Vec<LabelSet>,
    pub k: usize,
    pub methods: usize,
}

/// Calibration images with optional human-verified label sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CalibrationSet {
    pub image_ids: Vec<String>,
    pub verified: BTreeMap<String, LabelSet>,
}

impl CalibrationSet {
    /// The first `n` images of the universe (all of them if there are fewer).
    pub fn first_n(universe: &[String], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("calibration size must be at least 1".into()));
        }
        let image_ids: Vec<String> = universe.iter().take(n).cloned().collect();
        if image_ids.is_empty() {
            return Err(Error::InvalidConfig("image universe is empty".into()));
        }
        Ok(Self {
            image_ids,
            verified: BTreeMap::new(),
        })
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.image_ids.iter().any(|i| i == image_id)
    }
}

/// Ground-truth label sets over the calibration images, in calibration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroundTruth {
    pub images: Vec<String>,
    pub sets: Vec<LabelSet>,
}

/// `⌈m/2⌉`, the vote threshold used when a run does not set one.
pub fn default_vote_threshold(methods: usize) -> usize {
    methods.div_ceil(2).max(1)
}

pub fn tally_votes(matrix: &PredictionMatrix, images: &[String]) -> Result<VoteTally> {
    let rows: Vec<usize> = images
        .iter()
        .map(|id| matrix.require_image(id))
        .collect::<Result<_>>()?;
    let methods = matrix.methods().len();
    let votes = rows
        .iter()
        .map(|&image| {
            let mut counts = BTreeMap::new();
            for method in 0..methods {
                for label in matrix.labels(image, method) {
                    *counts.entry(*label).or_insert(0) += 1;
                }
            }
            counts
        })
        .collect();
    Ok(VoteTally {
        images: images.to_vec(),
        votes,
        methods,
    })
}

pub fn pseudo_ground_truth(tally: &VoteTally, k: usize) -> Result<PseudoGroundTruth> {
    if k == 0 || k > tally.methods {
        return Err(Error::VoteThresholdOutOfRange {
            k,
            methods: tally.methods,
        });
    }
    let sets = tally
        .votes
        .iter()
        .map(|counts| {
            counts
                .iter()
                .filter(|(_, v)| **v >= k)
                .map(|(label, _)| *label)
                .collect()
        })
        .collect();
    Ok(PseudoGroundTruth {
        images: tally.images.clone(),
        sets,
        k,
        methods: tally.methods,
    })
}

/// Human-verified sets where present (including an explicit empty set),
/// pseudo ground truth elsewhere. Covers the calibration images, in
/// calibration order; a calibration image outside the pseudo ground truth
/// falls back to an empty set unless verified.
pub fn effective_ground_truth(pgt: &PseudoGroundTruth, cal: &CalibrationSet) -> GroundTruth {
    let pseudo: BTreeMap<&str, &LabelSet> = pgt.images.iter().map(String::as_str).zip(&pgt.sets).collect();
    let sets = cal
        .image_ids
        .iter()
        .map(|id| {
            cal.verified
                .get(id)
                .or_else(|| pseudo.get(id.as_str()).copied())
                .cloned()
                .unwrap_or_default()
        })
        .collect();
    GroundTruth {
        images: cal.image_ids.clone(),
        sets,
    }
}
