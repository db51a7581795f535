//! Published per-dataset settings: label batch size for prompted models,
//! score threshold and top-t for the image-text-matching scorer, and the
//! aggregation threshold / top-K.

use crate::aggregation::{AggregationConfig, ThresholdMode};
use crate::ingestion::ScoreFilterConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub image_count: usize,
    pub label_batch_size: usize,
    pub score_threshold: f64,
    pub score_top_t: usize,
    pub aggregation_threshold: f64,
    pub top_k: usize,
    /// Full score printed next to the aggregation threshold.
    pub reported_full_score: f64,
}

impl DatasetPreset {
    pub fn score_filter(&self) -> ScoreFilterConfig {
        ScoreFilterConfig {
            threshold: self.score_threshold,
            top_t: self.score_top_t,
        }
    }

    /// Aggregation settings, reading the threshold as a fraction of the full score.
    pub fn aggregation(&self) -> AggregationConfig {
        AggregationConfig {
            threshold: self.aggregation_threshold,
            threshold_mode: ThresholdMode::FractionOfFullScore,
            top_k: self.top_k,
            methods: None,
        }
    }
}

pub const PRESETS: [DatasetPreset; 6] = [
    DatasetPreset {
        name: "cifar-10",
        image_count: 10_000,
        label_batch_size: 10,
        score_threshold: 0.15,
        score_top_t: 3,
        aggregation_threshold: 0.900,
        top_k: 3,
        reported_full_score: 5.794,
    },
    DatasetPreset {
        name: "cifar-100",
        image_count: 10_000,
        label_batch_size: 20,
        score_threshold: 0.015,
        score_top_t: 5,
        aggregation_threshold: 0.830,
        top_k: 5,
        reported_full_score: 4.730,
    },
    DatasetPreset {
        name: "caltech256",
        image_count: 30_607,
        label_batch_size: 50,
        score_threshold: 0.006,
        score_top_t: 5,
        aggregation_threshold: 0.037,
        top_k: 7,
        reported_full_score: 5.176,
    },
    DatasetPreset {
        name: "imagenet-1k",
        image_count: 50_000,
        label_batch_size: 67,
        score_threshold: 0.00015,
        score_top_t: 20,
        aggregation_threshold: 0.300,
        top_k: 10,
        reported_full_score: 4.007,
    },
    DatasetPreset {
        name: "quickdraw",
        image_count: 2_500,
        label_batch_size: 60,
        score_threshold: 0.004,
        score_top_t: 5,
        aggregation_threshold: 0.018,
        top_k: 5,
        reported_full_score: 3.096,
    },
    DatasetPreset {
        name: "mnist",
        image_count: 10_000,
        label_batch_size: 10,
        score_threshold: 0.15,
        score_top_t: 3,
        aggregation_threshold: 0.950,
        top_k: 3,
        reported_full_score: 5.654,
    },
];

/// Looks a preset up by name, ignoring case, spaces, dashes and underscores.
pub fn preset(name: &str) -> Option<&'static DatasetPreset> {
    let key = |s: &str| {
        s.chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_lowercase()
    };
    let wanted = key(name);
    PRESETS.iter().find(|p| key(p.name) == wanted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_lenient() {
        assert_eq!(preset("CIFAR-10").unwrap().label_batch_size, 10);
        assert_eq!(preset("ImageNet 1K").unwrap().label_batch_size, 67);
        assert_eq!(preset("cifar100").unwrap().score_top_t, 5);
        assert!(preset("svhn").is_none());
    }

    #[test]
    fn cifar10_filter_settings() {
        let p = preset("cifar-10").unwrap();
        assert_eq!(
            p.score_filter(),
            ScoreFilterConfig {
                threshold: 0.15,
                top_t: 3
            }
        );
        let agg = p.aggregation();
        assert_eq!(agg.top_k, 3);
        assert!(agg.validate().is_ok());
    }
}
