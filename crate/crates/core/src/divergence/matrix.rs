use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::estimate::{mc_kl_with, KlEstimate, Normalization, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::exec;

/// Trajectories sampled by one expert on one data domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub expert: String,
    pub domain: String,
    pub trajs: Vec<TrajectoryRecord>,
}

/// Group records by `(expert, domain)`, in label order.
pub fn group_records(records: Vec<TrajectoryRecord>) -> Vec<TrajectoryGroup> {
    let mut groups: BTreeMap<(String, String), Vec<TrajectoryRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.expert.clone(), r.domain.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((expert, domain), trajs)| TrajectoryGroup {
            expert,
            domain,
            trajs,
        })
        .collect()
}

/// Forward KL per (expert row, data-domain column); `None` marks a cell with
/// no trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub experts: Vec<String>,
    pub data_domains: Vec<String>,
    pub normalization: Normalization,
    pub cells: Vec<Vec<Option<KlEstimate>>>,
    pub perf_delta: Option<Vec<Option<f64>>>,
}

impl KlMatrix {
    pub fn cell(&self, expert: &str, domain: &str) -> Option<&KlEstimate> {
        let r = self.experts.iter().position(|e| e == expert)?;
        let c = self.data_domains.iter().position(|d| d == domain)?;
        self.cells[r][c].as_ref()
    }
}

pub fn kl_matrix(
    groups: &[TrajectoryGroup],
    perf: Option<&BTreeMap<String, f64>>,
    norm: Normalization,
) -> Result<KlMatrix> {
    let mut seen = BTreeSet::new();
    for g in groups {
        if !seen.insert((g.expert.as_str(), g.domain.as_str())) {
            return Err(Error::DuplicateGroup {
                expert: g.expert.clone(),
                domain: g.domain.clone(),
            });
        }
        if g.trajs.is_empty() {
            return Err(Error::EmptyInput("trajectory group"));
        }
    }
    let experts: Vec<String> = groups
        .iter()
        .map(|g| g.expert.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let data_domains: Vec<String> = groups
        .iter()
        .map(|g| g.domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let estimates = exec::map_slice(groups, |g| mc_kl_with(&g.trajs, norm));
    let mut cells = vec![vec![None; data_domains.len()]; experts.len()];
    for (g, est) in groups.iter().zip(estimates) {
        let r = experts.binary_search(&g.expert).unwrap_or_default();
        let c = data_domains.binary_search(&g.domain).unwrap_or_default();
        cells[r][c] = Some(est?);
    }
    let perf_delta = perf.map(|p| data_domains.iter().map(|d| p.get(d).copied()).collect());
    Ok(KlMatrix {
        experts,
        data_domains,
        normalization: norm,
        cells,
        perf_delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NeighborhoodRule {
    /// Neighbor iff its KL is at most `c` times the domain's own expert KL.
    Relative { c: f64 },
    /// Neighbor iff its KL is below `epsilon`.
    Absolute { epsilon: f64 },
}

pub const DEFAULT_RELATIVE_C: f64 = 1.5;

impl Default for NeighborhoodRule {
    fn default() -> Self {
        NeighborhoodRule::Relative {
            c: DEFAULT_RELATIVE_C,
        }
    }
}

impl NeighborhoodRule {
    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            NeighborhoodRule::Relative { c } => ("c", c),
            NeighborhoodRule::Absolute { epsilon } => ("epsilon", epsilon),
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, format!("{v} is not a positive real")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub expert: String,
    pub kl: f64,
}

/// Experts other than `domain`'s own whose KL on `domain` passes the rule,
/// sorted by ascending KL (then label).
///
/// The own expert of a domain is the expert row carrying the same label.
pub fn neighborhoods(matrix: &KlMatrix, domain: &str, rule: NeighborhoodRule) -> Result<Vec<Neighbor>> {
    rule.validate()?;
    let col = matrix
        .data_domains
        .iter()
        .position(|d| d == domain)
        .ok_or_else(|| Error::MissingCell(format!("no data-domain column `{domain}`")))?;
    let threshold_ok: Box<dyn Fn(f64) -> bool> = match rule {
        NeighborhoodRule::Relative { c } => {
            let own = matrix
                .cell(domain, domain)
                .ok_or_else(|| Error::MissingCell(format!("no self cell ({domain}, {domain})")))?
                .kl;
            Box::new(move |kl| kl <= c * own)
        }
        NeighborhoodRule::Absolute { epsilon } => Box::new(move |kl| kl < epsilon),
    };
    let mut out: Vec<Neighbor> = matrix
        .experts
        .iter()
        .zip(&matrix.cells)
        .filter(|(e, _)| e.as_str() != domain)
        .filter_map(|(e, row)| row[col].map(|cell| (e, cell.kl)))
        .filter(|(_, kl)| threshold_ok(*kl))
        .map(|(e, kl)| Neighbor {
            expert: e.clone(),
            kl,
        })
        .collect();
    out.sort_by(|a, b| a.kl.total_cmp(&b.kl).then_with(|| a.expert.cmp(&b.expert)));
    Ok(out)
}
