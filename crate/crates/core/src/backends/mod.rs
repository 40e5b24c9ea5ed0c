//! Trial scorers and score normalization.

mod norm;
mod plda;
mod scoring;

pub use norm::{adaptive_snorm, cal_norm, cohort_stats, top_count, NormStats};
pub use plda::{
    adapt_plda, fit_plda_em, interpolate_plda, score_plda, PldaFit, PldaModel, PldaScorer,
};
pub use scoring::{
    average, cohort_scores, model_vectors, score_cosine, score_trials, CohortScores,
    CosineScorer, PairScorer, Prepared,
};
