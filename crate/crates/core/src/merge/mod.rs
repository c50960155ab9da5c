//! Task vectors and checkpoint merging.
//!
//! Every float tensor is merged independently; tensors with other dtypes are
//! carried through from the anchor (or from the first model when averaging
//! without one).

pub mod kernels;
mod ops;
mod recipe;
mod task_vector;

pub use ops::{
    average_merge, dare_transform, merge, merge_to_archive, sce_merge, task_arithmetic_merge,
    ties_merge, DEFAULT_BATCH_BYTES,
};
pub use recipe::{
    DareConfig, MergeMethod, MergeRecipe, OutputDType, DEFAULT_DENSITY, DEFAULT_DROP_P,
    DEFAULT_LAMBDA, DEFAULT_SELECT_TAU,
};
pub use task_vector::{check_compatible, task_vector, task_vector_with_ids, Delta, TaskVector};
