use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Checkpoint;

/// Per-tensor f32 delta with the shape of the anchor tensor it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Difference between a fine-tuned checkpoint and its anchor, over the anchor's
/// float tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub anchor_id: String,
    pub model_id: String,
    pub deltas: BTreeMap<String, Delta>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Result<&Delta> {
        self.deltas
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }
}

/// Check that two checkpoints have the same float-tensor names and shapes.
pub fn check_compatible(reference: &Checkpoint, other: &Checkpoint) -> Result<()> {
    let left = reference.compute_names();
    let right = other.compute_names();
    if left != right {
        let missing = left
            .iter()
            .find(|n| !right.contains(n))
            .or_else(|| right.iter().find(|n| !left.contains(n)))
            .copied()
            .unwrap_or_default();
        return Err(Error::NameMismatch(missing.to_string()));
    }
    for name in left {
        let a = reference.tensor(name)?.shape();
        let b = other.tensor(name)?.shape();
        if a != b {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(())
}

/// Elementwise `widen(model) - widen(anchor)` in f32.
pub fn delta_values(model: &[f32], anchor: &[f32]) -> Vec<f32> {
    model.iter().zip(anchor).map(|(m, a)| m - a).collect()
}

pub fn task_vector(model: &Checkpoint, anchor: &Checkpoint) -> Result<TaskVector> {
    task_vector_with_ids(model, anchor, "", "")
}

pub fn task_vector_with_ids(
    model: &Checkpoint,
    anchor: &Checkpoint,
    model_id: &str,
    anchor_id: &str,
) -> Result<TaskVector> {
    check_compatible(anchor, model)?;
    let mut deltas = BTreeMap::new();
    for name in anchor.compute_names() {
        let a = anchor.tensor(name)?;
        let values = delta_values(&model.f32_values(name)?, &a.to_f32()?);
        deltas.insert(
            name.to_string(),
            Delta {
                shape: a.shape().to_vec(),
                values,
            },
        );
    }
    Ok(TaskVector {
        anchor_id: anchor_id.to_string(),
        model_id: model_id.to_string(),
        deltas,
    })
}
