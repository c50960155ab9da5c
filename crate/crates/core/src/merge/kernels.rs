//! Per-tensor merge kernels over flat f32 delta buffers.
//!
//! Cross-model reductions accumulate in f64 and round to f32 once, so a
//! coordinate shared by k identical task vectors comes back bit-exactly.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{name_id, stream_key, uniform_at};

/// Coordinates per parallel work item for elementwise passes.
const CHUNK: usize = 1 << 15;

/// `ceil(fraction * d)`, treating products within 1e-9 of an integer as that
/// integer so that e.g. 0.7 * 10 keeps 7 elements, not 8.
pub fn keep_count(fraction: f64, d: usize) -> usize {
    let x = fraction * d as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(d)
}

/// Mask of the `k` largest scores; equal scores keep the lower index first.
pub fn top_k_mask<F>(d: usize, k: usize, score: F) -> Vec<bool>
where
    F: Fn(usize) -> f64,
{
    if k >= d {
        return vec![true; d];
    }
    let mut mask = vec![false; d];
    if k == 0 {
        return mask;
    }
    let scores: Vec<f64> = (0..d).map(&score).collect();
    let mut idx: Vec<usize> = (0..d).collect();
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, by_rank);
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

fn check_fraction(name: &'static str, value: f64) -> Result<()> {
    if !(value > 0.0 && value <= 1.0) {
        return Err(Error::param(name, format!("{value} is outside (0, 1]")));
    }
    Ok(())
}

fn check_lengths(deltas: &[&[f32]]) -> Result<usize> {
    let first = deltas.first().ok_or(Error::EmptyInput("task vectors"))?;
    let d = first.len();
    if let Some(bad) = deltas.iter().find(|x| x.len() != d) {
        return Err(Error::LengthMismatch {
            left: d,
            right: bad.len(),
        });
    }
    Ok(d)
}

/// Ties trim: keep the `ceil(density * d)` largest-magnitude entries.
pub fn ties_trim(delta: &[f32], density: f64) -> Result<Vec<f32>> {
    check_fraction("density_k", density)?;
    let keep = top_k_mask(delta.len(), keep_count(density, delta.len()), |i| {
        f64::from(delta[i].abs())
    });
    Ok(delta
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect())
}

/// Trim, elect and disjoint-mean; returns the merged delta (before lambda).
///
/// The elected sign of a coordinate is the sign of the sum of trimmed values;
/// a zero sum contributes 0. Only trimmed values carrying the elected sign are
/// averaged.
pub fn ties_fuse(deltas: &[&[f32]], density: f64) -> Result<Vec<f32>> {
    let d = check_lengths(deltas)?;
    let trimmed: Vec<Vec<f32>> = deltas
        .iter()
        .map(|x| ties_trim(x, density))
        .collect::<Result<_>>()?;
    let mut out = vec![0f32; d];
    exec::for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        for (off, slot) in chunk.iter_mut().enumerate() {
            let j = base + off;
            let sum: f64 = trimmed.iter().map(|t| f64::from(t[j])).sum();
            if sum == 0.0 || sum.is_nan() {
                continue;
            }
            let positive = sum > 0.0;
            let (mut acc, mut n) = (0f64, 0u32);
            for t in &trimmed {
                let v = t[j];
                if v != 0.0 && (v > 0.0) == positive {
                    acc += f64::from(v);
                    n += 1;
                }
            }
            if n > 0 {
                *slot = (acc / f64::from(n)) as f32;
            }
        }
    });
    Ok(out)
}

/// Outcome of an SCE fusion over one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceFused {
    pub delta: Vec<f32>,
    pub coefficients: Vec<f64>,
}

/// Select / calculate / erase over one tensor.
///
/// Selection keeps the `ceil(select_tau * d)` coordinates with the largest
/// cross-model variance. Coefficients are each model's share of the selected
/// squared mass (uniform when it is all zero). Erasure drops values against the
/// sign with the larger total magnitude; equal magnitudes keep the positive
/// side.
pub fn sce_fuse(deltas: &[&[f32]], select_tau: f64) -> Result<SceFused> {
    check_fraction("select_tau", select_tau)?;
    let d = check_lengths(deltas)?;
    let m = deltas.len();
    if m == 1 {
        return Ok(SceFused {
            delta: deltas[0].to_vec(),
            coefficients: vec![1.0],
        });
    }

    // Variance over values sorted per coordinate, so model order cannot
    // perturb the selection.
    let mut variance = vec![0f64; d];
    exec::for_each_chunk_mut(&mut variance, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        let mut buf = Vec::with_capacity(m);
        for (off, slot) in chunk.iter_mut().enumerate() {
            let j = base + off;
            buf.clear();
            buf.extend(deltas.iter().map(|x| f64::from(x[j])));
            buf.sort_unstable_by(f64::total_cmp);
            let mean = buf.iter().sum::<f64>() / m as f64;
            *slot = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        }
    });
    let selected = top_k_mask(d, keep_count(select_tau, d), |j| variance[j]);

    let energy: Vec<f64> = deltas
        .iter()
        .map(|x| {
            x.iter()
                .zip(&selected)
                .filter(|(_, &s)| s)
                .map(|(&v, _)| f64::from(v) * f64::from(v))
                .sum()
        })
        .collect();
    let total: f64 = energy.iter().sum();
    let coefficients: Vec<f64> = if total > 0.0 {
        energy.iter().map(|e| e / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };

    let mut out = vec![0f32; d];
    exec::for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        for (off, slot) in chunk.iter_mut().enumerate() {
            let j = base + off;
            if !selected[j] {
                continue;
            }
            let (mut pos, mut neg) = (0f64, 0f64);
            for x in deltas {
                let v = f64::from(x[j]);
                if v > 0.0 {
                    pos += v;
                } else {
                    neg -= v;
                }
            }
            let keep_positive = pos >= neg;
            let mut acc = 0f64;
            for (x, c) in deltas.iter().zip(&coefficients) {
                let v = x[j];
                if v != 0.0 && (v > 0.0) == keep_positive {
                    acc += c * f64::from(v);
                }
            }
            *slot = acc as f32;
        }
    });
    Ok(SceFused {
        delta: out,
        coefficients,
    })
}

/// Check a DARE drop probability.
pub fn check_drop(drop_p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::param("drop_p", format!("{drop_p} is outside [0, 1)")));
    }
    Ok(())
}

/// Drop-and-rescale in place. Element `i` of tensor `name` is dropped when the
/// counter-based uniform at `(seed, name, i)` falls below `drop_p`; survivors
/// are scaled by `1 / (1 - drop_p)`.
pub fn dare_apply(values: &mut [f32], name: &str, drop_p: f64, seed: u64) -> Result<()> {
    check_drop(drop_p)?;
    if drop_p == 0.0 {
        return Ok(());
    }
    let key = stream_key(seed, name_id(name));
    let scale = 1.0 / (1.0 - drop_p);
    exec::for_each_chunk_mut(values, CHUNK, |ci, chunk| {
        let base = (ci * CHUNK) as u64;
        for (off, v) in chunk.iter_mut().enumerate() {
            *v = if uniform_at(key, base + off as u64) < drop_p {
                0.0
            } else {
                (f64::from(*v) * scale) as f32
            };
        }
    });
    Ok(())
}

/// Elementwise arithmetic mean, accumulated in f64 in the listed order.
pub fn mean(values: &[&[f32]]) -> Result<Vec<f32>> {
    let d = check_lengths(values)?;
    let n = values.len() as f64;
    let mut out = vec![0f32; d];
    exec::for_each_chunk_mut(&mut out, CHUNK, |ci, chunk| {
        let base = ci * CHUNK;
        for (off, slot) in chunk.iter_mut().enumerate() {
            let j = base + off;
            let s: f64 = values.iter().map(|x| f64::from(x[j])).sum();
            *slot = (s / n) as f32;
        }
    });
    Ok(out)
}

/// Elementwise sum, accumulated in f64 in the listed order.
pub fn sum(values: &[&[f32]]) -> Result<Vec<f64>> {
    let d = check_lengths(values)?;
    Ok((0..d)
        .map(|j| values.iter().map(|x| f64::from(x[j])).sum())
        .collect())
}

/// `anchor + lambda * delta`, rounded once to f32.
pub fn apply_delta(anchor: &[f32], delta: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if anchor.len() != delta.len() {
        return Err(Error::LengthMismatch {
            left: anchor.len(),
            right: delta.len(),
        });
    }
    Ok(anchor
        .iter()
        .zip(delta)
        .map(|(&a, &t)| (f64::from(a) + lambda * f64::from(t)) as f32)
        .collect())
}
