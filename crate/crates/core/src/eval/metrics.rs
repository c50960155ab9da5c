use serde::{Deserialize, Serialize};

use super::logs::SampleId;
use crate::error::{Error, Result};

/// Fraction of successful rollouts out of exactly `k`.
pub fn avg_at_k(outcomes: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if outcomes.len() != k {
        return Err(Error::LengthMismatch {
            left: k,
            right: outcomes.len(),
        });
    }
    Ok(outcomes.iter().filter(|&&o| o).count() as f64 / k as f64)
}

/// Per-sample accuracy of one model on one task, aligned by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub model_id: String,
    pub task: String,
    pub sample_ids: Vec<SampleId>,
    pub acc: Vec<f64>,
}

impl EvalMatrix {
    pub fn new(
        model_id: impl Into<String>,
        task: impl Into<String>,
        sample_ids: Vec<SampleId>,
        acc: Vec<f64>,
    ) -> Result<Self> {
        if sample_ids.len() != acc.len() {
            return Err(Error::LengthMismatch {
                left: sample_ids.len(),
                right: acc.len(),
            });
        }
        if let Some(bad) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::param("acc", format!("{bad} is outside [0, 1]")));
        }
        Ok(Self {
            model_id: model_id.into(),
            task: task.into(),
            sample_ids,
            acc,
        })
    }

    /// Convenience constructor numbering samples `0..n`.
    pub fn from_acc(model_id: impl Into<String>, task: impl Into<String>, acc: Vec<f64>) -> Result<Self> {
        let ids = (0..acc.len() as i64).map(SampleId::Int).collect();
        Self::new(model_id, task, ids, acc)
    }

    pub fn n_t(&self) -> usize {
        self.acc.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainVector {
    pub gains: Vec<f64>,
    pub baseline_id: String,
    pub model_id: String,
    pub task: String,
}

/// Elementwise `max(model - baseline, 0)`.
pub fn gain_vector(model: &EvalMatrix, baseline: &EvalMatrix) -> Result<GainVector> {
    if model.task != baseline.task {
        return Err(Error::Mismatch(format!(
            "task `{}` vs baseline task `{}`",
            model.task, baseline.task
        )));
    }
    if model.n_t() != baseline.n_t() {
        return Err(Error::LengthMismatch {
            left: baseline.n_t(),
            right: model.n_t(),
        });
    }
    if model.sample_ids != baseline.sample_ids {
        return Err(Error::Mismatch(format!(
            "sample ids of `{}` and `{}` differ on task `{}`",
            model.model_id, baseline.model_id, model.task
        )));
    }
    Ok(GainVector {
        gains: model
            .acc
            .iter()
            .zip(&baseline.acc)
            .map(|(m, b)| (m - b).max(0.0))
            .collect(),
        baseline_id: baseline.model_id.clone(),
        model_id: model.model_id.clone(),
        task: model.task.clone(),
    })
}

pub const UNION_ID: &str = "union";

/// Elementwise maximum of gain vectors sharing task, length and baseline.
pub fn union_gain(gvs: &[GainVector]) -> Result<GainVector> {
    let first = gvs.first().ok_or(Error::EmptyInput("gain vectors"))?;
    for g in &gvs[1..] {
        if g.task != first.task || g.baseline_id != first.baseline_id {
            return Err(Error::Mismatch(format!(
                "gain vector ({}, {}) vs ({}, {})",
                g.task, g.baseline_id, first.task, first.baseline_id
            )));
        }
        if g.gains.len() != first.gains.len() {
            return Err(Error::LengthMismatch {
                left: first.gains.len(),
                right: g.gains.len(),
            });
        }
    }
    let mut gains = first.gains.clone();
    for g in &gvs[1..] {
        for (u, v) in gains.iter_mut().zip(&g.gains) {
            *u = u.max(*v);
        }
    }
    Ok(GainVector {
        gains,
        baseline_id: first.baseline_id.clone(),
        model_id: UNION_ID.to_string(),
        task: first.task.clone(),
    })
}

/// Cosine similarity of two gain vectors; `None` when either is all zero.
pub fn gain_consistency(union: &GainVector, model: &GainVector) -> Result<Option<f64>> {
    if union.gains.len() != model.gains.len() {
        return Err(Error::LengthMismatch {
            left: union.gains.len(),
            right: model.gains.len(),
        });
    }
    let dot: f64 = union.gains.iter().zip(&model.gains).map(|(a, b)| a * b).sum();
    let nu: f64 = union.gains.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nm: f64 = model.gains.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nm == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (nu * nm)).clamp(-1.0, 1.0)))
}

/// Sample Pearson correlation, computed with centered sums in f64.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("Pearson correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Pearson correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
