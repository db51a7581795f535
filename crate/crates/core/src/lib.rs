//! Dataset renovation: combine several label sources for an image
//! classification test set into expertise-weighted soft labels, and flag
//! images whose original label looks wrong or incomplete.
//!
//! The flow is ingest ([`ingestion`]) → vote on a calibration subset
//! ([`voting`]) → estimate each method's accuracy ([`expertise`]) →
//! aggregate ([`aggregation`]). [`pipeline`] strings these together and
//! owns the verdict log used by the review service.

pub mod aggregation;
pub mod error;
pub mod evaluation;
pub mod expertise;
pub mod ingestion;
pub mod label_space;
pub mod pipeline;
pub mod presets;
pub mod prompt_plan;
pub mod synthetic;
pub mod voting;

pub use error::{Error, Result};
pub use label_space::{LabelId, LabelSet, LabelVocabulary};
