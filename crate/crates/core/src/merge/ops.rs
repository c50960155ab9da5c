use std::collections::BTreeMap;
use std::path::Path;

use super::kernels::{self, apply_delta, dare_apply, sce_fuse, ties_fuse};
use super::recipe::{MergeMethod, MergeRecipe, OutputDType};
use super::task_vector::{check_compatible, delta_values, Delta, TaskVector};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::derive_seed;
use crate::tensor::{ArchiveWriter, Checkpoint, Tensor};

/// Default working-set budget for [`merge_to_archive`] batches.
pub const DEFAULT_BATCH_BYTES: usize = 1 << 30;

/// Drop-and-rescale every delta of a task vector.
pub fn dare_transform(tv: &TaskVector, drop_p: f64, seed: u64) -> Result<TaskVector> {
    kernels::check_drop(drop_p)?;
    let names: Vec<&String> = tv.deltas.keys().collect();
    let dropped = exec::map_slice(&names, |name| -> Result<(String, Delta)> {
        let d = &tv.deltas[name.as_str()];
        let mut values = d.values.clone();
        dare_apply(&mut values, name, drop_p, seed)?;
        Ok((
            name.to_string(),
            Delta {
                shape: d.shape.clone(),
                values,
            },
        ))
    });
    Ok(TaskVector {
        anchor_id: tv.anchor_id.clone(),
        model_id: tv.model_id.clone(),
        deltas: dropped.into_iter().collect::<Result<_>>()?,
    })
}

/// Elementwise mean of the float tensors; other tensors come from the first model.
pub fn average_merge(models: &[&Checkpoint]) -> Result<Checkpoint> {
    let first = models.first().ok_or(Error::EmptyInput("models"))?;
    for m in &models[1..] {
        check_compatible(first, m)?;
    }
    warn_opaque_differences(first, models);
    let names = first.compute_names();
    let merged = exec::map_slice(&names, |name| -> Result<Vec<f32>> {
        let values = models
            .iter()
            .map(|m| m.f32_values(name))
            .collect::<Result<Vec<_>>>()?;
        kernels::mean(&refs(&values))
    });
    assemble(first, &names, merged, OutputDType::Anchor)
}

/// `anchor + lambda * sum(tvs)`.
pub fn task_arithmetic_merge(anchor: &Checkpoint, tvs: &[TaskVector], lambda: f64) -> Result<Checkpoint> {
    check_lambda(lambda)?;
    merge_task_vectors(anchor, tvs, |a, deltas| {
        let total = kernels::sum(deltas)?;
        Ok(a.iter()
            .zip(&total)
            .map(|(&x, &s)| (f64::from(x) + lambda * s) as f32)
            .collect())
    })
}

/// Trim / elect / disjoint-mean per tensor, then `anchor + lambda * merged`.
pub fn ties_merge(
    anchor: &Checkpoint,
    tvs: &[TaskVector],
    density_k: f64,
    lambda: f64,
) -> Result<Checkpoint> {
    check_lambda(lambda)?;
    merge_task_vectors(anchor, tvs, |a, deltas| {
        apply_delta(a, &ties_fuse(deltas, density_k)?, lambda)
    })
}

/// Select / calculate / erase per tensor, then `anchor + fused`.
pub fn sce_merge(anchor: &Checkpoint, tvs: &[TaskVector], select_tau: f64) -> Result<Checkpoint> {
    merge_task_vectors(anchor, tvs, |a, deltas| {
        apply_delta(a, &sce_fuse(deltas, select_tau)?.delta, 1.0)
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::param("lambda", format!("{lambda} is not finite")));
    }
    Ok(())
}

fn refs(values: &[Vec<f32>]) -> Vec<&[f32]> {
    values.iter().map(Vec::as_slice).collect()
}

fn merge_task_vectors<F>(anchor: &Checkpoint, tvs: &[TaskVector], fuse: F) -> Result<Checkpoint>
where
    F: Fn(&[f32], &[&[f32]]) -> Result<Vec<f32>> + Sync + Send,
{
    let first = tvs.first().ok_or(Error::EmptyInput("task vectors"))?;
    if let Some(tv) = tvs.iter().find(|t| t.anchor_id != first.anchor_id) {
        return Err(Error::AnchorMismatch {
            expected: first.anchor_id.clone(),
            found: tv.anchor_id.clone(),
        });
    }
    let names = anchor.compute_names();
    for tv in tvs {
        if tv.deltas.len() != names.len() {
            let missing = names
                .iter()
                .find(|n| !tv.deltas.contains_key(**n))
                .map(|n| n.to_string())
                .or_else(|| tv.deltas.keys().find(|k| anchor.get(k).is_none()).cloned())
                .unwrap_or_default();
            return Err(Error::NameMismatch(missing));
        }
        for name in &names {
            let delta = tv.get(name)?;
            let shape = anchor.tensor(name)?.shape();
            if delta.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    left: shape.to_vec(),
                    right: delta.shape.clone(),
                });
            }
        }
    }
    let merged = exec::map_slice(&names, |name| -> Result<Vec<f32>> {
        let a = anchor.f32_values(name)?;
        let deltas: Vec<&[f32]> = tvs
            .iter()
            .map(|tv| tv.deltas[*name].values.as_slice())
            .collect();
        fuse(&a, &deltas)
    });
    assemble(anchor, &names, merged, OutputDType::Anchor)
}

fn assemble(
    reference: &Checkpoint,
    names: &[&str],
    merged: Vec<Result<Vec<f32>>>,
    output: OutputDType,
) -> Result<Checkpoint> {
    let mut values: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for (name, v) in names.iter().zip(merged) {
        values.insert(name, v?);
    }
    let mut out = Checkpoint::new();
    out.set_metadata(reference.metadata().cloned());
    for (name, t) in reference.iter() {
        let tensor = match values.remove(name) {
            Some(v) => Tensor::from_f32(output.resolve(t.dtype()), t.shape().to_vec(), &v)?,
            None => t.clone(),
        };
        out.put(name.to_string(), tensor);
    }
    Ok(out)
}

fn warn_opaque_differences(reference: &Checkpoint, models: &[&Checkpoint]) {
    for (name, t) in reference.iter().filter(|(_, t)| !t.is_compute()) {
        if models.iter().any(|m| m.get(name) != Some(t)) {
            log::warn!(
                "{name}: {} tensor is not merged; carrying it from the reference checkpoint",
                t.dtype()
            );
        }
    }
}

/// A validated merge: the reference checkpoint supplies names, shapes, dtypes
/// and metadata of the output.
struct Plan<'a> {
    recipe: &'a MergeRecipe,
    anchor: Option<&'a Checkpoint>,
    models: &'a [&'a Checkpoint],
    reference: &'a Checkpoint,
}

impl<'a> Plan<'a> {
    fn new(recipe: &'a MergeRecipe, anchor: Option<&'a Checkpoint>, models: &'a [&'a Checkpoint]) -> Result<Self> {
        recipe.validate()?;
        if models.is_empty() {
            return Err(Error::EmptyInput("models"));
        }
        if models.len() != recipe.model_ids.len() {
            return Err(Error::LengthMismatch {
                left: recipe.model_ids.len(),
                right: models.len(),
            });
        }
        let needs_anchor = recipe.method.needs_anchor() || recipe.dare.is_some();
        let anchor = match anchor {
            Some(a) => Some(a),
            None if needs_anchor => {
                return Err(Error::param("anchor", format!("{} needs an anchor checkpoint", recipe.method.name())))
            }
            None => None,
        };
        let reference = anchor.unwrap_or(models[0]);
        for m in models {
            check_compatible(reference, m)?;
        }
        warn_opaque_differences(reference, models);
        Ok(Self {
            recipe,
            anchor,
            models,
            reference,
        })
    }

    fn fuse(&self, name: &str) -> Result<Vec<f32>> {
        let r = self.recipe;
        let models = self
            .models
            .iter()
            .map(|m| m.f32_values(name))
            .collect::<Result<Vec<_>>>()?;
        let Some(anchor) = self.anchor else {
            return kernels::mean(&refs(&models));
        };
        let a = anchor.f32_values(name)?;
        let mut deltas: Vec<Vec<f32>> = models.iter().map(|m| delta_values(m, &a)).collect();
        if let Some(dare) = r.dare {
            for (i, d) in deltas.iter_mut().enumerate() {
                dare_apply(d, name, dare.drop_p, derive_seed(dare.seed, i as u64))?;
            }
        }
        let deltas = refs(&deltas);
        match r.method {
            MergeMethod::Average => {
                let rebuilt: Vec<Vec<f32>> = deltas
                    .iter()
                    .map(|d| apply_delta(&a, d, 1.0))
                    .collect::<Result<_>>()?;
                kernels::mean(&refs(&rebuilt))
            }
            MergeMethod::TaskArithmetic => {
                let total = kernels::sum(&deltas)?;
                Ok(a.iter()
                    .zip(&total)
                    .map(|(&x, &s)| (f64::from(x) + r.lambda * s) as f32)
                    .collect())
            }
            MergeMethod::Ties => apply_delta(&a, &ties_fuse(&deltas, r.density_k)?, r.lambda),
            MergeMethod::Sce => apply_delta(&a, &sce_fuse(&deltas, r.select_tau)?.delta, 1.0),
        }
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let t = self.reference.tensor(name)?;
        if !t.is_compute() {
            return Ok(t.clone());
        }
        let values = self.fuse(name)?;
        Tensor::from_f32(self.recipe.output_dtype.resolve(t.dtype()), t.shape().to_vec(), &values)
    }

    fn output_dtype(&self, t: &Tensor) -> crate::DType {
        if t.is_compute() {
            self.recipe.output_dtype.resolve(t.dtype())
        } else {
            t.dtype()
        }
    }
}

/// Build task vectors (unless averaging without DARE), apply DARE when
/// configured, dispatch on the method and renarrow to the output dtypes.
///
/// `models` must be ordered as `recipe.model_ids`. Model `i` draws its DARE
/// mask from `derive_seed(dare.seed, i)`, so masks are independent across
/// models.
pub fn merge(recipe: &MergeRecipe, anchor: Option<&Checkpoint>, models: &[&Checkpoint]) -> Result<Checkpoint> {
    let plan = Plan::new(recipe, anchor, models)?;
    let names: Vec<&str> = plan.reference.names().collect();
    let tensors = exec::map_slice(&names, |name| plan.tensor(name));
    let mut out = Checkpoint::new();
    out.set_metadata(plan.reference.metadata().cloned());
    for (name, t) in names.iter().zip(tensors) {
        out.put(name.to_string(), t?);
    }
    Ok(out)
}

/// Merge straight into an archive at `path`, holding roughly `batch_bytes` of
/// f32 working data at a time. Tensors within a batch are merged in parallel
/// and written in name order.
pub fn merge_to_archive(
    recipe: &MergeRecipe,
    anchor: Option<&Checkpoint>,
    models: &[&Checkpoint],
    path: impl AsRef<Path>,
    batch_bytes: usize,
) -> Result<()> {
    let plan = Plan::new(recipe, anchor, models)?;
    let mut writer = ArchiveWriter::create(
        path,
        plan.reference.metadata(),
        plan.reference
            .iter()
            .map(|(n, t)| (n.to_string(), plan.output_dtype(t), t.shape().to_vec())),
    )?;
    let per_element = 4 * (models.len() * 2 + 2);
    let names: Vec<&str> = plan.reference.names().collect();
    let mut start = 0;
    while start < names.len() {
        let mut end = start;
        let mut bytes = 0usize;
        while end < names.len() {
            let cost = plan.reference.tensor(names[end])?.numel() * per_element;
            if end > start && bytes + cost > batch_bytes {
                break;
            }
            bytes += cost;
            end += 1;
        }
        let batch = &names[start..end];
        let tensors = exec::map_slice(batch, |name| plan.tensor(name));
        for (name, t) in batch.iter().zip(tensors) {
            writer.write_tensor(name, &t?)?;
        }
        start = end;
    }
    writer.finish()
}
