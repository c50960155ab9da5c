use std::path::PathBuf;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use weightlab_core::diagnostics::{
    layer_report, random_jaccard_baseline, KindGroup, LayerReport, NamePatterns, ProjectionSpec, WeightKind,
    DEFAULT_TARGET_DIM,
};
use weightlab_core::rng::derive_seed;

use super::{load_checkpoint, stem_label};
use crate::config::{overlay, required, usage, Settings};
use crate::output::{fixed_opt, json_bytes, sig6, sig6_opt, write_atomic, FileDigest, Table};
use crate::svg::Heatmap;

pub const DEFAULT_LAYER: usize = 17;
pub const DEFAULT_ETA: f64 = 1e-3;
pub const DEFAULT_RANDOM_P: f64 = 0.3;

#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    /// Baseline (SFT) checkpoint the shifts are measured against
    #[arg(long)]
    pub sft: Option<PathBuf>,

    /// Fine-tuned checkpoints, at least two
    #[arg(long, num_args = 2..)]
    pub models: Option<Vec<PathBuf>>,

    /// Display labels for the models [default: file stems]
    #[arg(long, num_args = 2..)]
    pub labels: Option<Vec<String>>,

    /// Decoder layer to analyse [default: 17]
    #[arg(long)]
    pub layer: Option<usize>,

    /// Relative change threshold of the changed-weight mask [default: 0.001]
    #[arg(long)]
    pub eta: Option<f64>,

    /// Dimension of the random orthogonal projection [default: 256]
    #[arg(long)]
    pub target_dim: Option<usize>,

    /// JSON file with the weight kinds: {"kinds": [{"label", "group", "pattern"}]}
    #[arg(long)]
    pub patterns: Option<PathBuf>,

    /// Weight kinds given inline in a config file
    #[arg(skip)]
    pub kinds: Option<Vec<WeightKind>>,

    /// Bit probability of the random reference masks [default: 0.3]
    #[arg(long)]
    pub random_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub sft: PathBuf,
    pub models: Vec<PathBuf>,
    pub labels: Vec<String>,
    pub layer: usize,
    pub eta: f64,
    pub projection: ProjectionSpec,
    pub patterns: NamePatterns,
    pub random_p: f64,
    pub out_dir: PathBuf,
}

impl ReportConfig {
    pub fn resolve(settings: &Settings, flags: ReportArgs) -> anyhow::Result<Self> {
        let file: ReportArgs = settings.file_args()?;
        let a = overlay!(flags, file; sft, models, labels, layer, eta, target_dim, patterns, kinds, random_p);
        let sft = required(a.sft, "--sft")?;
        let models = required(a.models, "--models")?;
        if models.len() < 2 {
            return Err(usage("weight-report needs at least two --models"));
        }
        let labels = match a.labels {
            Some(l) if l.len() != models.len() => {
                return Err(usage(format!("{} labels for {} models", l.len(), models.len())));
            }
            Some(l) => l,
            None => models.iter().map(|p| stem_label(p)).collect(),
        };
        let patterns = match (a.patterns, a.kinds) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading patterns file {}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("patterns file {}: {e}", path.display())))?
            }
            (None, Some(kinds)) => NamePatterns { kinds },
            (None, None) => NamePatterns::default(),
        };
        let eta = a.eta.unwrap_or(DEFAULT_ETA);
        if !(eta.is_finite() && eta > 0.0) {
            return Err(weightlab_core::Error::InvalidParameter {
                name: "eta",
                detail: format!("{eta} is not a positive real"),
            }
            .into());
        }
        let random_p = a.random_p.unwrap_or(DEFAULT_RANDOM_P);
        if !(random_p > 0.0 && random_p < 1.0) {
            return Err(weightlab_core::Error::InvalidParameter {
                name: "random_p",
                detail: format!("{random_p} is outside (0, 1)"),
            }
            .into());
        }
        let target_dim = a.target_dim.unwrap_or(DEFAULT_TARGET_DIM);
        if target_dim == 0 {
            return Err(weightlab_core::Error::InvalidParameter {
                name: "target_dim",
                detail: "must be at least 1".into(),
            }
            .into());
        }
        Ok(Self {
            sft,
            models,
            labels,
            layer: a.layer.unwrap_or(DEFAULT_LAYER),
            eta,
            projection: ProjectionSpec {
                target_dim,
                seed: settings.seed(),
            },
            patterns,
            random_p,
            out_dir: settings.out_dir.clone(),
        })
    }
}

/// Jaccard overlap of random masks with the size of one weight kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomRow {
    pub kind: String,
    pub d: usize,
    pub seed: u64,
    pub analytic: f64,
    pub empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    pub inputs: Vec<FileDigest>,
    pub config: ReportConfig,
    pub report: LayerReport,
    pub random: Vec<RandomRow>,
}

pub const FILES: [&str; 6] = [
    "jaccard.csv",
    "pairs.csv",
    "jaccard.svg",
    "cosine_attention.svg",
    "cosine_ffn.svg",
    "weight_report.json",
];

/// Compute the layer report and write the CSV, SVG and JSON outputs.
pub fn cmd_weight_report(cfg: &ReportConfig) -> anyhow::Result<WeightReport> {
    let sft = load_checkpoint(&cfg.sft)?;
    let models = cfg
        .models
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<_> = models.iter().collect();
    let report = layer_report(&refs, &cfg.labels, &sft, cfg.layer, cfg.eta, cfg.projection, &cfg.patterns)?;

    let random = cfg
        .patterns
        .kinds
        .iter()
        .zip(&report.tensors)
        .enumerate()
        .map(|(k, (kind, name))| {
            let d = sft.tensor(name)?.numel();
            let seed = derive_seed(cfg.projection.seed, k as u64);
            let b = random_jaccard_baseline(cfg.random_p, d, seed)?;
            Ok(RandomRow {
                kind: kind.label.clone(),
                d,
                seed,
                analytic: b.analytic,
                empirical: b.empirical,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut inputs = vec![FileDigest::of(&cfg.sft)?];
    for p in &cfg.models {
        inputs.push(FileDigest::of(p)?);
    }
    let out = WeightReport {
        inputs,
        config: cfg.clone(),
        report,
        random,
    };
    write_outputs(cfg, &out)?;
    Ok(out)
}

fn group_of(kinds: &[WeightKind], group: KindGroup) -> impl Fn(&[f64]) -> Option<f64> + '_ {
    move |values| {
        let picked: Vec<f64> = kinds
            .iter()
            .zip(values)
            .filter(|(k, _)| k.group == group)
            .map(|(_, v)| *v)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

fn write_outputs(cfg: &ReportConfig, out: &WeightReport) -> anyhow::Result<()> {
    let r = &out.report;
    let kinds = &r.kinds;
    let mut header = vec!["pair".to_string()];
    header.extend(kinds.iter().map(|k| k.label.clone()));
    header.extend(["attention".to_string(), "ffn".to_string()]);

    let mut wide = Table::new(&header)?;
    let mut pair_labels = Vec::new();
    let mut jac_cells = Vec::new();
    for p in &r.pairs {
        let label = format!("{}/{}", p.left, p.right);
        let mut row = vec![label.clone()];
        row.extend(p.jaccard.iter().map(|v| sig6_opt(*v)));
        row.extend([sig6_opt(p.attention_jaccard), sig6_opt(p.ffn_jaccard)]);
        wide.row(&row)?;
        pair_labels.push(label);
        jac_cells.push(p.jaccard.clone());
    }
    let attn = group_of(kinds, KindGroup::Attention);
    let ffn = group_of(kinds, KindGroup::Ffn);
    for (name, pick) in [("random (analytic)", 0), ("random (empirical)", 1)] {
        let values: Vec<f64> = out
            .random
            .iter()
            .map(|x| if pick == 0 { x.analytic } else { x.empirical })
            .collect();
        let mut row = vec![name.to_string()];
        row.extend(values.iter().map(|v| sig6(*v)));
        row.extend([sig6_opt(attn(&values)), sig6_opt(ffn(&values))]);
        wide.row(&row)?;
        pair_labels.push(name.to_string());
        jac_cells.push(values.into_iter().map(Some).collect());
    }
    write_atomic(&cfg.out_dir.join("jaccard.csv"), &wide.into_bytes()?)?;

    let mut long = Table::new(&["left", "right", "kind", "jaccard", "cosine"])?;
    for p in &r.pairs {
        for (k, kind) in kinds.iter().enumerate() {
            long.row(&[&p.left, &p.right, &kind.label, &sig6_opt(p.jaccard[k]), &sig6_opt(p.cosine[k])])?;
        }
        long.row(&[&p.left, &p.right, "attention", &sig6_opt(p.attention_jaccard), &sig6_opt(p.attention_cosine)])?;
        long.row(&[&p.left, &p.right, "ffn", &sig6_opt(p.ffn_jaccard), &sig6_opt(p.ffn_cosine)])?;
    }
    write_atomic(&cfg.out_dir.join("pairs.csv"), &long.into_bytes()?)?;

    let kind_labels: Vec<String> = kinds.iter().map(|k| k.label.clone()).collect();
    let jac_ann: Vec<Vec<String>> = jac_cells
        .iter()
        .map(|row| row.iter().map(|v| fixed_opt(*v, 3)).collect())
        .collect();
    let svg = Heatmap {
        title: &format!("Changed-weight Jaccard overlap, layer {}", r.layer),
        rows: &pair_labels,
        cols: &kind_labels,
        values: &jac_cells,
        annotations: &jac_ann,
        range: (0.0, 1.0),
    }
    .render();
    write_atomic(&cfg.out_dir.join("jaccard.svg"), svg.as_bytes())?;

    for (file, title, pick) in [
        ("cosine_attention.svg", "attention", KindGroup::Attention),
        ("cosine_ffn.svg", "FFN", KindGroup::Ffn),
    ] {
        let n = cfg.labels.len();
        let mut cells = vec![vec![Some(1.0); n]; n];
        let upper = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        for ((i, j), p) in upper.zip(&r.pairs) {
            let v = match pick {
                KindGroup::Attention => p.attention_cosine,
                KindGroup::Ffn => p.ffn_cosine,
            };
            cells[i][j] = v;
            cells[j][i] = v;
        }
        let ann: Vec<Vec<String>> = cells
            .iter()
            .map(|row| row.iter().map(|v| fixed_opt(*v, 3)).collect())
            .collect();
        let svg = Heatmap {
            title: &format!("Weight-shift cosine ({title}), layer {}", r.layer),
            rows: &cfg.labels,
            cols: &cfg.labels,
            values: &cells,
            annotations: &ann,
            range: (0.0, 1.0),
        }
        .render();
        write_atomic(&cfg.out_dir.join(file), svg.as_bytes())?;
    }

    write_atomic(&cfg.out_dir.join("weight_report.json"), &json_bytes(out)?)?;
    Ok(())
}

pub fn run(settings: &Settings, args: ReportArgs) -> anyhow::Result<()> {
    let cfg = ReportConfig::resolve(settings, args)?;
    let out = cmd_weight_report(&cfg)?;
    let r = &out.report;
    println!("layer {}  eta {}  target_dim {}", r.layer, r.eta, r.projection.target_dim);
    for p in &r.pairs {
        println!(
            "{}/{}  jaccard attn {} ffn {}  cosine attn {} ffn {}",
            p.left,
            p.right,
            fixed_opt(p.attention_jaccard, 3),
            fixed_opt(p.ffn_jaccard, 3),
            fixed_opt(p.attention_cosine, 3),
            fixed_opt(p.ffn_cosine, 3)
        );
    }
    let mean = |f: fn(&RandomRow) -> f64| out.random.iter().map(f).sum::<f64>() / out.random.len() as f64;
    println!(
        "random p={}  analytic {}  empirical {}",
        cfg.random_p,
        crate::output::fixed(mean(|x| x.analytic), 3),
        crate::output::fixed(mean(|x| x.empirical), 3)
    );
    Ok(())
}
