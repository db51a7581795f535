use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the renovation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {malformed} of {total} lines malformed, refusing file (first error on line {first_line}: {first_message})")]
    MostlyMalformed {
        path: String,
        malformed: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },

    #[error("label {label:?} is retained for image {image_id} but carries no score")]
    MissingScore { image_id: String, label: String },

    #[error("duplicate prediction cell for image {image_id}, method {method}")]
    DuplicateCell { image_id: String, method: String },

    #[error("image {0} is not part of the image universe")]
    UnknownImage(String),

    #[error("unknown method {0}")]
    UnknownMethod(String),

    #[error("method {0} has no expertise weight")]
    MissingWeight(String),

    #[error("duplicate method {0}")]
    DuplicateMethod(String),

    #[error("vote threshold k={k} out of range 1..={methods}")]
    VoteThresholdOutOfRange { k: usize, methods: usize },

    #[error("ground truth is empty on every calibration image, coverage is undefined")]
    DegenerateGroundTruth,

    #[error("no original label for image {0}")]
    MissingOriginal(String),

    #[error("cannot normalize an empty label set")]
    EmptyLabelSet,

    #[error("batch size {batch_size} out of range 1..={vocab_size}")]
    BatchSizeOutOfRange { batch_size: usize, vocab_size: usize },

    #[error("batch index {index} out of range (plan has {batches} batches)")]
    BatchIndexOutOfRange { index: usize, batches: usize },

    #[error("evaluation slice is empty")]
    EmptyEvaluation,

    #[error("instance too large for the brute-force oracle: {0}")]
    InstanceTooLarge(String),

    #[error("label {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Stable machine-readable kind, used in error files.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidVocabulary(_) => "invalid_vocabulary",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MostlyMalformed { .. } => "mostly_malformed",
            Error::MissingScore { .. } => "missing_score",
            Error::DuplicateCell { .. } => "duplicate_cell",
            Error::UnknownImage(_) => "unknown_image",
            Error::UnknownMethod(_) => "unknown_method",
            Error::MissingWeight(_) => "missing_weight",
            Error::DuplicateMethod(_) => "duplicate_method",
            Error::VoteThresholdOutOfRange { .. } => "vote_threshold_out_of_range",
            Error::DegenerateGroundTruth => "degenerate_ground_truth",
            Error::MissingOriginal(_) => "missing_original",
            Error::EmptyLabelSet => "empty_label_set",
            Error::BatchSizeOutOfRange { .. } => "batch_size_out_of_range",
            Error::BatchIndexOutOfRange { .. } => "batch_index_out_of_range",
            Error::EmptyEvaluation => "empty_evaluation",
            Error::InstanceTooLarge(_) => "instance_too_large",
            Error::OutOfVocabulary(_) => "out_of_vocabulary",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Parse { .. } => "parse",
        }
    }
}
