use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::{changed_bits, jaccard_checked, BitMask};
use super::projection::{cosine, OrthoProjector, ProjectionSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindGroup {
    Attention,
    Ffn,
}

/// One weight kind of a decoder layer, located by a tensor-name pattern in
/// which `{layer}` stands for the layer index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightKind {
    pub label: String,
    pub group: KindGroup,
    pub pattern: String,
}

impl WeightKind {
    pub fn new(label: &str, group: KindGroup, pattern: &str) -> Self {
        Self {
            label: label.to_string(),
            group,
            pattern: pattern.to_string(),
        }
    }

    pub fn resolve(&self, layer: usize) -> String {
        self.pattern.replace("{layer}", &layer.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamePatterns {
    pub kinds: Vec<WeightKind>,
}

impl Default for NamePatterns {
    /// Attention projections and gated-MLP weights under the usual
    /// `model.layers.{layer}` decoder naming.
    fn default() -> Self {
        use KindGroup::{Attention, Ffn};
        let p = |s: &str| format!("model.layers.{{layer}}.{s}.weight");
        Self {
            kinds: vec![
                WeightKind::new("Q", Attention, &p("self_attn.q_proj")),
                WeightKind::new("K", Attention, &p("self_attn.k_proj")),
                WeightKind::new("V", Attention, &p("self_attn.v_proj")),
                WeightKind::new("O", Attention, &p("self_attn.o_proj")),
                WeightKind::new("FFN-dn", Ffn, &p("mlp.down_proj")),
                WeightKind::new("FFN-up", Ffn, &p("mlp.up_proj")),
                WeightKind::new("FFN-gt", Ffn, &p("mlp.gate_proj")),
            ],
        }
    }
}

impl NamePatterns {
    /// Layer indices for which every kind resolves to a tensor of `ckpt`.
    pub fn layers_in(&self, ckpt: &Checkpoint) -> Vec<usize> {
        let Some(first) = self.kinds.first() else {
            return Vec::new();
        };
        let Some((prefix, suffix)) = first.pattern.split_once("{layer}") else {
            return Vec::new();
        };
        let mut layers: Vec<usize> = ckpt
            .names()
            .filter_map(|n| n.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok())
            .filter(|&l| self.kinds.iter().all(|k| ckpt.get(&k.resolve(l)).is_some()))
            .collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

/// Per-model statistics: fraction of changed weights for each kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub label: String,
    pub changed_fraction: Vec<f64>,
}

/// Similarity of one model pair; `None` marks an undefined cell (empty mask
/// union for Jaccard, empty overlap region for cosine).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub left: String,
    pub right: String,
    pub jaccard: Vec<Option<f64>>,
    pub cosine: Vec<Option<f64>>,
    pub attention_jaccard: Option<f64>,
    pub ffn_jaccard: Option<f64>,
    pub attention_cosine: Option<f64>,
    pub ffn_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub eta: f64,
    pub projection: ProjectionSpec,
    pub kinds: Vec<WeightKind>,
    pub tensors: Vec<String>,
    pub models: Vec<ModelStats>,
    pub pairs: Vec<PairReport>,
}

/// Unweighted mean of the defined entries, or `None` if there are none.
pub fn mean_defined<'a>(values: impl IntoIterator<Item = &'a Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group_mean(kinds: &[WeightKind], values: &[Option<f64>], group: KindGroup) -> Option<f64> {
    mean_defined(
        kinds
            .iter()
            .zip(values)
            .filter(|(k, _)| k.group == group)
            .map(|(_, v)| v),
    )
}

/// Changed-weight overlap and projected shift cosine for every pair of
/// fine-tuned models at one layer.
///
/// For each weight kind, the overlap region of a pair is the intersection of
/// their changed masks. Both shift vectors are restricted to that region and
/// projected with one shared projector per tensor size, so cosines from
/// different pairs use the same basis.
pub fn layer_report(
    rl_models: &[&Checkpoint],
    labels: &[String],
    sft: &Checkpoint,
    layer: usize,
    eta: f64,
    spec: ProjectionSpec,
    patterns: &NamePatterns,
) -> Result<LayerReport> {
    if rl_models.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: rl_models.len(),
        });
    }
    if patterns.kinds.is_empty() {
        return Err(Error::EmptyInput("weight kinds"));
    }
    let kinds = &patterns.kinds;
    let names: Vec<String> = kinds.iter().map(|k| k.resolve(layer)).collect();
    for name in &names {
        let base = sft.tensor(name)?;
        if !base.is_compute() {
            return Err(Error::InvalidTensor {
                name: name.clone(),
                detail: format!("{} is not a float dtype", base.dtype()),
            });
        }
        for m in rl_models {
            let t = m.tensor(name)?;
            if t.shape() != base.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: base.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
    }

    let nk = kinds.len();
    let masks: Vec<BitMask> = exec::map_range(rl_models.len() * nk, |job| {
        let (m, k) = (job / nk, job % nk);
        changed_bits(&rl_models[m].f32_values(&names[k])?, &sft.f32_values(&names[k])?, eta)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut projectors: BTreeMap<usize, OrthoProjector> = BTreeMap::new();
    for name in &names {
        let n = sft.tensor(name)?.numel();
        if let std::collections::btree_map::Entry::Vacant(e) = projectors.entry(n) {
            e.insert(OrthoProjector::from_spec(n, spec)?);
        }
    }

    let models = labels
        .iter()
        .enumerate()
        .map(|(m, label)| ModelStats {
            label: label.clone(),
            changed_fraction: (0..nk)
                .map(|k| {
                    let mask = &masks[m * nk + k];
                    if mask.is_empty() {
                        0.0
                    } else {
                        mask.count_ones() as f64 / mask.len() as f64
                    }
                })
                .collect(),
        })
        .collect();

    let pair_index: Vec<(usize, usize)> = (0..rl_models.len())
        .flat_map(|i| (i + 1..rl_models.len()).map(move |j| (i, j)))
        .collect();
    let cells = exec::map_range(pair_index.len() * nk, |job| -> Result<(Option<f64>, Option<f64>)> {
        let (i, j) = pair_index[job / nk];
        let k = job % nk;
        let (a, b) = (&masks[i * nk + k], &masks[j * nk + k]);
        let jac = jaccard_checked(a, b)?;
        let region = a.and(b)?;
        if region.count_ones() == 0 {
            return Ok((jac, None));
        }
        let indices: Vec<usize> = region.ones().collect();
        let base = sft.f32_values(&names[k])?;
        let shift = |m: usize| -> Result<Vec<f32>> {
            let w = rl_models[m].f32_values(&names[k])?;
            Ok(indices.iter().map(|&x| w[x] - base[x]).collect())
        };
        let proj = &projectors[&base.len()];
        let pa = proj.project_sparse(&indices, &shift(i)?)?;
        let pb = proj.project_sparse(&indices, &shift(j)?)?;
        Ok((jac, Some(cosine(&pa, &pb)?)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let pairs = pair_index
        .iter()
        .enumerate()
        .map(|(p, &(i, j))| {
            let row = &cells[p * nk..(p + 1) * nk];
            let jaccard: Vec<Option<f64>> = row.iter().map(|c| c.0).collect();
            let cosine: Vec<Option<f64>> = row.iter().map(|c| c.1).collect();
            PairReport {
                left: labels[i].clone(),
                right: labels[j].clone(),
                attention_jaccard: group_mean(kinds, &jaccard, KindGroup::Attention),
                ffn_jaccard: group_mean(kinds, &jaccard, KindGroup::Ffn),
                attention_cosine: group_mean(kinds, &cosine, KindGroup::Attention),
                ffn_cosine: group_mean(kinds, &cosine, KindGroup::Ffn),
                jaccard,
                cosine,
            }
        })
        .collect();

    Ok(LayerReport {
        layer,
        eta,
        projection: spec,
        kinds: kinds.clone(),
        tensors: names,
        models,
        pairs,
    })
}
