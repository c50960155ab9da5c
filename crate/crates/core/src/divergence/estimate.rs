use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled response scored under the policy that generated it and under a
/// comparison policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt_id: String,
    pub domain: String,
    #[serde(default)]
    pub expert: String,
    pub sampler_logprobs: Vec<f64>,
    pub other_logprobs: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sampler_logprobs.len() != self.other_logprobs.len() {
            return Err(Error::LengthMismatch {
                left: self.sampler_logprobs.len(),
                right: self.other_logprobs.len(),
            });
        }
        if self.sampler_logprobs.is_empty() {
            return Err(Error::EmptyInput("trajectory log-probabilities"));
        }
        for &v in self.sampler_logprobs.iter().chain(&self.other_logprobs) {
            if v.is_nan() || v > 0.0 {
                return Err(Error::PositiveLogProb {
                    prompt_id: self.prompt_id.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Sum of per-token log-ratios `log p_sampler - log p_other`.
    pub fn log_ratio(&self) -> f64 {
        self.sampler_logprobs
            .iter()
            .zip(&self.other_logprobs)
            .map(|(a, b)| a - b)
            .sum()
    }
}

/// How each trajectory's log-ratio is scaled before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Whole-response log-ratio.
    #[default]
    Sequence,
    /// Log-ratio divided by the number of tokens.
    PerToken,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Sequence => "sequence",
            Normalization::PerToken => "per_token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub stderr: f64,
    pub n_traj: usize,
}

/// Mean of per-trajectory statistics with the standard error of the mean
/// (sample standard deviation over `sqrt(n)`; 0 for a single trajectory).
pub fn mean_stderr(stats: &[f64]) -> Result<KlEstimate> {
    if stats.is_empty() {
        return Err(Error::EmptyInput("trajectories"));
    }
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let stderr = if stats.len() > 1 {
        let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(KlEstimate {
        kl: mean,
        stderr,
        n_traj: stats.len(),
    })
}

/// Monte-Carlo forward KL from the sampler policy to the comparison policy.
pub fn mc_kl(trajs: &[TrajectoryRecord]) -> Result<KlEstimate> {
    mc_kl_with(trajs, Normalization::Sequence)
}

pub fn mc_kl_with(trajs: &[TrajectoryRecord], norm: Normalization) -> Result<KlEstimate> {
    let stats = trajs
        .iter()
        .map(|t| {
            t.validate()?;
            let r = t.log_ratio();
            Ok(match norm {
                Normalization::Sequence => r,
                Normalization::PerToken => r / t.sampler_logprobs.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_stderr(&stats)
}

/// On-policy distillation objective: the forward KL from the student, which
/// sampled the trajectories, to the teacher that scored them.
pub fn distillation_objective(student_trajs: &[TrajectoryRecord]) -> Result<KlEstimate> {
    mc_kl(student_trajs)
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Distribution(format!("{name} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// `sum_i P_i ln(P_i / Q_i)` with `0 ln(0 / q) = 0`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution("P", p)?;
    check_distribution("Q", q)?;
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Distribution(format!("Q is zero at index {i} where P is positive")));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Parse a JSON-lines trace file; blank lines are skipped.
pub fn read_traces(reader: impl BufRead) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
