use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use weightlab_core::divergence::{
    group_records, kl_matrix, neighborhoods, read_traces, KlMatrix, Neighbor, NeighborhoodRule, Normalization,
    DEFAULT_RELATIVE_C,
};

use crate::config::{overlay, required, usage, Settings};
use crate::output::{fixed, json_bytes, sig6, sig6_opt, write_atomic, FileDigest, Table, UNDEFINED};
use crate::svg::Heatmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    Relative,
    Absolute,
}

fn parse_rule(s: &str) -> Result<RuleMode, String> {
    match s {
        "relative" => Ok(RuleMode::Relative),
        "absolute" => Ok(RuleMode::Absolute),
        _ => Err(format!("unknown neighborhood rule `{s}` (expected relative or absolute)")),
    }
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "sequence" => Ok(Normalization::Sequence),
        "per-token" | "per_token" => Ok(Normalization::PerToken),
        _ => Err(format!("unknown normalization `{s}` (expected sequence or per-token)")),
    }
}

#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlArgs {
    /// Trajectory traces, one JSON object per line
    #[arg(long)]
    pub traces: Option<PathBuf>,

    /// JSON object mapping each data domain to a performance delta
    #[arg(long)]
    pub perf: Option<PathBuf>,

    /// Neighborhood rule: relative (c times the own expert's KL) or absolute (below epsilon) [default: relative]
    #[arg(long, value_parser = parse_rule)]
    pub rule: Option<RuleMode>,

    /// Multiplier of the relative rule [default: 1.5]
    #[arg(long)]
    pub c: Option<f64>,

    /// Threshold of the absolute rule
    #[arg(long)]
    pub epsilon: Option<f64>,

    /// Data domains to list neighborhoods for [default: all]
    #[arg(long, num_args = 1..)]
    pub domains: Option<Vec<String>>,

    /// Log-ratio scaling used for neighborhoods and the heatmap: sequence or per-token [default: sequence]
    #[arg(long, value_parser = parse_normalization)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlConfig {
    pub traces: PathBuf,
    pub perf: Option<PathBuf>,
    pub rule: NeighborhoodRule,
    pub domains: Option<Vec<String>>,
    pub normalization: Normalization,
    pub out_dir: PathBuf,
}

impl KlConfig {
    pub fn resolve(settings: &Settings, flags: KlArgs) -> anyhow::Result<Self> {
        let file: KlArgs = settings.file_args()?;
        let a = overlay!(flags, file; traces, perf, rule, c, epsilon, domains, normalization);
        let rule = match a.rule.unwrap_or(RuleMode::Relative) {
            RuleMode::Relative => {
                if a.epsilon.is_some() {
                    return Err(usage("--epsilon applies to the absolute rule only"));
                }
                NeighborhoodRule::Relative {
                    c: a.c.unwrap_or(DEFAULT_RELATIVE_C),
                }
            }
            RuleMode::Absolute => {
                if a.c.is_some() {
                    return Err(usage("--c applies to the relative rule only"));
                }
                NeighborhoodRule::Absolute {
                    epsilon: required(a.epsilon, "--epsilon")?,
                }
            }
        };
        rule.validate()?;
        Ok(Self {
            traces: required(a.traces, "--traces")?,
            perf: a.perf,
            rule,
            domains: a.domains,
            normalization: a.normalization.unwrap_or_default(),
            out_dir: settings.out_dir.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlReport {
    pub inputs: Vec<FileDigest>,
    pub config: KlConfig,
    /// One matrix per normalization, sequence first.
    pub matrices: Vec<KlMatrix>,
    pub neighborhoods: BTreeMap<String, Vec<Neighbor>>,
}

pub const FILES: [&str; 4] = ["kl_matrix.csv", "neighborhoods.csv", "kl_matrix.svg", "kl.json"];

pub fn cmd_kl(cfg: &KlConfig) -> anyhow::Result<KlReport> {
    let file = File::open(&cfg.traces).with_context(|| format!("opening traces {}", cfg.traces.display()))?;
    let records = read_traces(BufReader::new(file)).with_context(|| format!("reading traces {}", cfg.traces.display()))?;
    let groups = group_records(records);
    let mut inputs = vec![FileDigest::of(&cfg.traces)?];
    let perf: Option<BTreeMap<String, f64>> = match &cfg.perf {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            inputs.push(FileDigest::of(path)?);
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => None,
    };

    let matrices = [Normalization::Sequence, Normalization::PerToken]
        .into_iter()
        .map(|n| kl_matrix(&groups, perf.as_ref(), n))
        .collect::<weightlab_core::Result<Vec<_>>>()?;
    let chosen = &matrices[usize::from(cfg.normalization == Normalization::PerToken)];
    let domains = cfg.domains.clone().unwrap_or_else(|| chosen.data_domains.clone());
    let mut hoods = BTreeMap::new();
    for d in &domains {
        hoods.insert(d.clone(), neighborhoods(chosen, d, cfg.rule)?);
    }
    let report = KlReport {
        inputs,
        config: cfg.clone(),
        matrices,
        neighborhoods: hoods,
    };
    write_outputs(cfg, &report, &domains)?;
    Ok(report)
}

fn write_outputs(cfg: &KlConfig, r: &KlReport, domains: &[String]) -> anyhow::Result<()> {
    let mut cells = Table::new(&["expert", "domain", "normalization", "kl", "stderr", "n", "perf_delta"])?;
    let first = &r.matrices[0];
    for (i, expert) in first.experts.iter().enumerate() {
        for (j, domain) in first.data_domains.iter().enumerate() {
            for m in &r.matrices {
                let perf = m
                    .perf_delta
                    .as_ref()
                    .map_or_else(|| UNDEFINED.to_string(), |p| sig6_opt(p[j]));
                let (kl, se, n) = match &m.cells[i][j] {
                    Some(e) => (sig6(e.kl), sig6(e.stderr), e.n_traj.to_string()),
                    None => (UNDEFINED.into(), UNDEFINED.into(), "0".into()),
                };
                cells.row(&[expert.as_str(), domain, m.normalization.name(), &kl, &se, &n, &perf])?;
            }
        }
    }
    write_atomic(&cfg.out_dir.join("kl_matrix.csv"), &cells.into_bytes()?)?;

    let mut hoods = Table::new(&["domain", "rank", "expert", "kl"])?;
    for d in domains {
        for (rank, n) in r.neighborhoods[d].iter().enumerate() {
            hoods.row(&[d.as_str(), &(rank + 1).to_string(), &n.expert, &sig6(n.kl)])?;
        }
    }
    write_atomic(&cfg.out_dir.join("neighborhoods.csv"), &hoods.into_bytes()?)?;

    let m = &r.matrices[usize::from(cfg.normalization == Normalization::PerToken)];
    let values: Vec<Vec<Option<f64>>> = m
        .cells
        .iter()
        .map(|row| row.iter().map(|c| c.map(|e| e.kl)).collect())
        .collect();
    let ann: Vec<Vec<String>> = m
        .cells
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| c.map_or_else(String::new, |e| format!("{}\n±{}", fixed(e.kl, 3), fixed(e.stderr, 3))))
                .collect()
        })
        .collect();
    let hi = values.iter().flatten().flatten().fold(0.0f64, |a, &b| a.max(b));
    let svg = Heatmap {
        title: &format!("Forward KL ({}), expert rows by data-domain columns", m.normalization.name()),
        rows: &m.experts,
        cols: &m.data_domains,
        values: &values,
        annotations: &ann,
        range: (0.0, hi),
    }
    .render();
    write_atomic(&cfg.out_dir.join("kl_matrix.svg"), svg.as_bytes())?;
    write_atomic(&cfg.out_dir.join("kl.json"), &json_bytes(r)?)?;
    Ok(())
}

pub fn run(settings: &Settings, args: KlArgs) -> anyhow::Result<()> {
    let cfg = KlConfig::resolve(settings, args)?;
    let r = cmd_kl(&cfg)?;
    for (domain, list) in &r.neighborhoods {
        let names: Vec<String> = list.iter().map(|n| format!("{} ({})", n.expert, fixed(n.kl, 4))).collect();
        println!("{domain}: {}", if names.is_empty() { "-".to_string() } else { names.join(", ") });
    }
    Ok(())
}
