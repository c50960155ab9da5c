use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weightlab_core::merge::{merge_to_archive, DareConfig, MergeMethod, MergeRecipe, OutputDType, DEFAULT_BATCH_BYTES};

use super::{load_checkpoint, stem_label};
use crate::config::{overlay, required, usage, Settings};
use crate::output::{json_bytes, write_atomic, FileDigest};

fn parse_method(s: &str) -> Result<MergeMethod, String> {
    match s {
        "average" => Ok(MergeMethod::Average),
        "ta" | "task-arithmetic" | "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
        "ties" => Ok(MergeMethod::Ties),
        "sce" => Ok(MergeMethod::Sce),
        _ => Err(format!("unknown merge method `{s}` (expected average, ta, ties or sce)")),
    }
}

fn parse_out_dtype(s: &str) -> Result<OutputDType, String> {
    match s {
        "anchor" => Ok(OutputDType::Anchor),
        "bf16" => Ok(OutputDType::Bf16),
        "f32" => Ok(OutputDType::F32),
        _ => Err(format!("unknown output dtype `{s}` (expected anchor, bf16 or f32)")),
    }
}

/// Flags of `weightlab merge`. Config-file keys use the field names, so a
/// file can carry a recipe (`method`, `lambda`, `density_k`, `select_tau`,
/// `dare`, `anchor_id`, `model_ids`, `output_dtype`) together with paths.
#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeArgs {
    /// Merge method: average, ta (task-arithmetic), ties or sce
    #[arg(long, value_parser = parse_method)]
    pub method: Option<MergeMethod>,

    /// Scale of the fused task vector [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Fraction of each task vector kept by Ties trimming [default: 0.2]
    #[arg(long = "density")]
    pub density_k: Option<f64>,

    /// Fraction of coordinates kept by SCE variance selection [default: 0.1]
    #[arg(long)]
    pub select_tau: Option<f64>,

    /// Drop probability of drop-and-rescale applied to every task vector
    #[arg(long)]
    pub dare_p: Option<f64>,

    #[arg(skip)]
    pub dare: Option<DareConfig>,

    /// Anchor (base) checkpoint that task vectors are taken against
    #[arg(long)]
    pub anchor: Option<PathBuf>,

    /// Identifier recorded for the anchor [default: anchor file stem]
    #[arg(long)]
    pub anchor_id: Option<String>,

    /// Fine-tuned checkpoints to merge
    #[arg(long, num_args = 1..)]
    pub models: Option<Vec<PathBuf>>,

    /// Identifiers recorded for the models [default: file stems]
    #[arg(long, num_args = 1..)]
    pub model_ids: Option<Vec<String>>,

    /// Output archive path
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,

    /// Dtype of merged tensors: anchor, bf16 or f32 [default: anchor]
    #[arg(long = "out-dtype", value_parser = parse_out_dtype)]
    pub output_dtype: Option<OutputDType>,
}

/// Validated parameters of one merge run.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub recipe: MergeRecipe,
    pub anchor: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub output: PathBuf,
}

impl MergeConfig {
    pub fn resolve(settings: &Settings, flags: MergeArgs) -> anyhow::Result<Self> {
        let file: MergeArgs = settings.file_args()?;
        let file_dare = file.dare;
        let a = overlay!(flags, file; method, lambda, density_k, select_tau, dare_p, anchor, anchor_id,
            models, model_ids, output, output_dtype);

        let method = required(a.method, "--method")?;
        let models = required(a.models, "--models")?;
        let output = required(a.output, "-o/--output")?;
        let model_ids = match a.model_ids {
            Some(ids) if ids.len() != models.len() => {
                return Err(usage(format!("{} model ids for {} models", ids.len(), models.len())));
            }
            Some(ids) => ids,
            None => models.iter().map(|p| stem_label(p)).collect(),
        };
        let dare_seed = settings
            .seed_flag
            .or(file_dare.map(|d| d.seed))
            .or(settings.seed_file)
            .unwrap_or(0);
        let dare = match (a.dare_p, file_dare) {
            (Some(drop_p), _) => Some(DareConfig { drop_p, seed: dare_seed }),
            (None, Some(d)) => Some(DareConfig { drop_p: d.drop_p, seed: dare_seed }),
            (None, None) => None,
        };
        let needs_anchor = method.needs_anchor() || dare.is_some();
        let anchor = if needs_anchor {
            Some(a.anchor.ok_or_else(|| usage(format!("method `{}` requires --anchor", describe(method, dare))))?)
        } else {
            None
        };
        let anchor_id = a
            .anchor_id
            .or_else(|| anchor.as_deref().map(stem_label))
            .unwrap_or_default();

        let mut recipe = MergeRecipe::new(method, anchor_id, model_ids);
        recipe.lambda = a.lambda.unwrap_or(recipe.lambda);
        recipe.density_k = a.density_k.unwrap_or(recipe.density_k);
        recipe.select_tau = a.select_tau.unwrap_or(recipe.select_tau);
        recipe.output_dtype = a.output_dtype.unwrap_or_default();
        recipe.dare = dare;
        recipe.validate()?;
        Ok(Self {
            recipe,
            anchor,
            models,
            output,
        })
    }
}

fn describe(method: MergeMethod, dare: Option<DareConfig>) -> String {
    match dare {
        Some(_) => format!("{}+dare", method.name()),
        None => method.name().to_string(),
    }
}

/// Sidecar written next to a merged archive.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub recipe: MergeRecipe,
    pub anchor: Option<NamedDigest>,
    pub models: Vec<NamedDigest>,
    pub output: FileDigest,
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedDigest {
    pub id: String,
    #[serde(flatten)]
    pub file: FileDigest,
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    output.with_file_name(name)
}

/// Merge the configured checkpoints, write the archive and its provenance
/// sidecar, and return the sidecar content.
pub fn cmd_merge(cfg: &MergeConfig) -> anyhow::Result<Provenance> {
    let anchor = cfg.anchor.as_deref().map(load_checkpoint).transpose()?;
    let models = cfg
        .models
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<_> = models.iter().collect();
    log::info!(
        "merging {} models with {} into {}",
        refs.len(),
        cfg.recipe.method.name(),
        cfg.output.display()
    );
    merge_to_archive(&cfg.recipe, anchor.as_ref(), &refs, &cfg.output, DEFAULT_BATCH_BYTES)?;

    let provenance = Provenance {
        tool: "weightlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        recipe: cfg.recipe.clone(),
        anchor: cfg
            .anchor
            .as_deref()
            .map(|p| {
                Ok::<_, anyhow::Error>(NamedDigest {
                    id: cfg.recipe.anchor_id.clone(),
                    file: FileDigest::of(p)?,
                })
            })
            .transpose()?,
        models: cfg
            .models
            .iter()
            .zip(&cfg.recipe.model_ids)
            .map(|(p, id)| {
                Ok(NamedDigest {
                    id: id.clone(),
                    file: FileDigest::of(p)?,
                })
            })
            .collect::<anyhow::Result<_>>()?,
        output: FileDigest::of(&cfg.output)?,
    };
    write_atomic(&sidecar_path(&cfg.output), &json_bytes(&provenance)?)?;
    Ok(provenance)
}

pub fn run(settings: &Settings, args: MergeArgs) -> anyhow::Result<()> {
    let cfg = MergeConfig::resolve(settings, args)?;
    let p = cmd_merge(&cfg)?;
    println!("{}  {}", p.output.sha256, p.output.path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(method: &str) -> MergeArgs {
        MergeArgs {
            method: Some(parse_method(method).unwrap()),
            models: Some(vec!["a/m1.st".into(), "a/m2.st".into()]),
            output: Some("out.st".into()),
            anchor: Some("a/sft.st".into()),
            ..MergeArgs::default()
        }
    }

    #[test]
    fn ids_default_to_file_stems() {
        let cfg = MergeConfig::resolve(&Settings::default(), args("ties")).unwrap();
        assert_eq!(cfg.recipe.model_ids, vec!["m1", "m2"]);
        assert_eq!(cfg.recipe.anchor_id, "sft");
        assert_eq!(cfg.recipe.method, MergeMethod::Ties);
    }

    #[test]
    fn average_drops_an_unneeded_anchor() {
        let cfg = MergeConfig::resolve(&Settings::default(), args("average")).unwrap();
        assert_eq!(cfg.anchor, None);
        let mut a = args("average");
        a.dare_p = Some(0.5);
        let cfg = MergeConfig::resolve(&Settings::default(), a).unwrap();
        assert!(cfg.anchor.is_some());
    }

    #[test]
    fn missing_anchor_is_a_usage_error() {
        let mut a = args("sce");
        a.anchor = None;
        let err = MergeConfig::resolve(&Settings::default(), a).unwrap_err();
        assert!(err.downcast_ref::<crate::UsageError>().is_some());
    }

    #[test]
    fn out_of_range_density_is_rejected() {
        let mut a = args("ties");
        a.density_k = Some(1.5);
        let err = MergeConfig::resolve(&Settings::default(), a).unwrap_err();
        assert_eq!(crate::classify(&err), ("invalid_parameter", 2));
    }

    #[test]
    fn file_recipe_fills_unset_flags() {
        let mut s = Settings {
            file: serde_json::from_str(r#"{"method": "ta", "lambda": 0.5, "dare": {"drop_p": 0.3, "seed": 11}}"#).unwrap(),
            ..Settings::default()
        };
        let mut a = args("ties");
        a.method = None;
        let cfg = MergeConfig::resolve(&s, a).unwrap();
        assert_eq!(cfg.recipe.method, MergeMethod::TaskArithmetic);
        assert_eq!(cfg.recipe.lambda, 0.5);
        assert_eq!(cfg.recipe.dare, Some(DareConfig { drop_p: 0.3, seed: 11 }));
        s.seed_flag = Some(4);
        let cfg = MergeConfig::resolve(&s, args("ties")).unwrap();
        assert_eq!(cfg.recipe.dare.unwrap().seed, 4);
    }

    #[test]
    fn sidecar_sits_next_to_the_archive() {
        assert_eq!(sidecar_path(Path::new("d/out.st")), PathBuf::from("d/out.st.provenance.json"));
    }
}
