use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use weightlab_core::eval::{consistency_table, read_eval_logs, ConsistencyRow, EvalSet};

use crate::config::{key_value, overlay, required, usage, Settings};
use crate::output::{json_bytes, sig6_opt, write_atomic, FileDigest, Table};

#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainArgs {
    /// Evaluation logs, one JSON record per line
    #[arg(long)]
    pub logs: Option<PathBuf>,

    /// Model whose accuracy the gains are measured against
    #[arg(long)]
    pub baseline: Option<String>,

    /// Single-task models whose gains form the union
    #[arg(long, num_args = 1..)]
    pub single: Option<Vec<String>>,

    /// Models compared against the union
    #[arg(long, num_args = 1..)]
    pub targets: Option<Vec<String>>,

    /// Rollouts per sample for a task, as TASK=K (repeatable)
    #[arg(long = "k")]
    pub k: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainConfig {
    pub logs: PathBuf,
    pub baseline: String,
    pub single: Vec<String>,
    pub targets: Vec<String>,
    pub k: BTreeMap<String, usize>,
    pub out_dir: PathBuf,
}

impl GainConfig {
    pub fn resolve(settings: &Settings, flags: GainArgs) -> anyhow::Result<Self> {
        let file: GainArgs = settings.file_args()?;
        let a = overlay!(flags, file; logs, baseline, single, targets, k);
        let mut k = BTreeMap::new();
        for entry in a.k.unwrap_or_default() {
            let (task, value) = key_value(&entry).map_err(usage)?;
            let value: usize = value
                .parse()
                .map_err(|_| usage(format!("--k {entry}: rollout count is not a positive integer")))?;
            if value == 0 {
                return Err(usage(format!("--k {entry}: rollout count must be at least 1")));
            }
            if k.insert(task.clone(), value).is_some() {
                return Err(usage(format!("--k given twice for task `{task}`")));
            }
        }
        Ok(Self {
            logs: required(a.logs, "--logs")?,
            baseline: required(a.baseline, "--baseline")?,
            single: required(a.single, "--single")?,
            targets: required(a.targets, "--targets")?,
            k,
            out_dir: settings.out_dir.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub inputs: Vec<FileDigest>,
    pub config: GainConfig,
    pub rows: Vec<ConsistencyRow>,
}

pub const FILES: [&str; 2] = ["gain.csv", "gain.json"];

/// Gain consistency of every target with the union of single-task gains, one
/// row per task the baseline was evaluated on.
pub fn cmd_gain(cfg: &GainConfig) -> anyhow::Result<GainReport> {
    let file = File::open(&cfg.logs).with_context(|| format!("opening eval logs {}", cfg.logs.display()))?;
    let records = read_eval_logs(BufReader::new(file)).with_context(|| format!("reading eval logs {}", cfg.logs.display()))?;
    let set = EvalSet::from_records(&records, &cfg.k)?;
    let rows = consistency_table(&set, &cfg.baseline, &cfg.single, &cfg.targets)?;
    let report = GainReport {
        inputs: vec![FileDigest::of(&cfg.logs)?],
        config: cfg.clone(),
        rows,
    };

    let mut header = vec!["task".to_string()];
    header.extend(cfg.targets.iter().cloned());
    let mut table = Table::new(&header)?;
    for row in &report.rows {
        let mut fields = vec![row.task.clone()];
        fields.extend(row.consistency.iter().map(|c| sig6_opt(*c)));
        table.row(&fields)?;
    }
    write_atomic(&cfg.out_dir.join("gain.csv"), &table.into_bytes()?)?;
    write_atomic(&cfg.out_dir.join("gain.json"), &json_bytes(&report)?)?;
    Ok(report)
}

pub fn run(settings: &Settings, args: GainArgs) -> anyhow::Result<()> {
    let cfg = GainConfig::resolve(settings, args)?;
    let r = cmd_gain(&cfg)?;
    for row in &r.rows {
        let cells: Vec<String> = cfg
            .targets
            .iter()
            .zip(&row.consistency)
            .map(|(t, c)| format!("{t}={}", sig6_opt(*c)))
            .collect();
        println!("{}: {}", row.task, cells.join(" "));
    }
    Ok(())
}
