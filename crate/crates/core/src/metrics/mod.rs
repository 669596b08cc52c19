//! Distances, verification accuracy, retrieval mAP and the compatibility
//! calculus built on top of them.

mod audit;
mod compat;
mod retrieval;
mod selection;
mod verification;

pub use audit::{pairwise_criterion_audit, PairwiseAudit};
pub use compat::{
    absolute_gain, avg_multi_accuracy, avg_multi_compat, build_compatibility_matrix,
    compatibility_from_galleries, ecc_check, update_gain, CompatibilityMatrix, CompatibilityReport,
    EccFlag, GainEntry, MetricKind, MetricSpec,
};
pub use retrieval::{average_precision, retrieval_map, MapResult};
pub use selection::{model_selection, EpochScore, Selection, SelectionTracker};
pub use verification::{
    best_threshold_accuracy, cosine_distance, pair_distances, verification_accuracy, ThresholdAccuracy,
};
