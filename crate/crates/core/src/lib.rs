//! Speaker-verification back-end toolkit.
//!
//! Embedding preprocessing (centering, whitening, LDA, CORAL, length
//! normalization, stacking), PLDA and pairwise quadratic scorers, cohort score
//! normalization, logistic fusion and calibration with duration terms,
//! detection metrics, and a synthetic corpus generator with oracle LLRs.

pub mod backends;
pub mod error;
pub mod fusion;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod psvm;
pub mod synth;

pub use error::{Error, FileFormatError, Result};
pub use model::{
    align, align_trials, frames, trial_durations, DurationInfo, Embedding, EmbeddingSet, EnrollmentManifest,
    OperatingPoint, ScoreMatrix, ScoreSet, Trial, TrialKey, TrialLabel, TrialList,
    PRIMARY_OPERATING_POINTS,
};

/// A fitted value plus non-fatal diagnostics produced while fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted<T> {
    pub value: T,
    pub warnings: Vec<String>,
}
