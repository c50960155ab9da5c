//! Monte-Carlo forward KL over externally produced log-prob traces, KL
//! matrices across experts and data domains, and policy neighborhoods.

mod estimate;
mod matrix;

pub use estimate::{
    categorical_kl, distillation_objective, mc_kl, mc_kl_with, mean_stderr, read_traces, KlEstimate,
    Normalization, TrajectoryRecord,
};
pub use matrix::{
    group_records, kl_matrix, neighborhoods, KlMatrix, Neighbor, NeighborhoodRule, TrajectoryGroup,
    DEFAULT_RELATIVE_C,
};
