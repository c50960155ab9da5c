//! Weight-shift diagnostics: changed-weight masks, Jaccard overlap against a
//! random baseline, and cosine similarity of shift vectors after orthogonal
//! random projection.

mod mask;
pub mod projection;
mod report;

pub use mask::{
    changed_bits, changed_mask, changed_mask_for, jaccard, jaccard_checked, random_jaccard_baseline,
    shift_vector, BitMask, MaskMap, RandomBaseline,
};
pub use projection::{cosine, project_cosine, OrthoProjector, ProjectionSpec, DEFAULT_TARGET_DIM};
pub use report::{
    layer_report, mean_defined, KindGroup, LayerReport, ModelStats, NamePatterns, PairReport, WeightKind,
};
