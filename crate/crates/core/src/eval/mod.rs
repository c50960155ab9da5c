//! Evaluation analytics: Avg@K, gain vectors against a baseline, the union of
//! single-task gains, gain consistency and Pearson correlation.

mod logs;
mod metrics;

pub use logs::{consistency_table, read_eval_logs, ConsistencyRow, EvalRecord, EvalSet, SampleId};
pub use metrics::{
    avg_at_k, gain_consistency, gain_vector, pearson, union_gain, EvalMatrix, GainVector, UNION_ID,
};
