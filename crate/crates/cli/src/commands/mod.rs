pub mod baseline;
pub mod gain;
pub mod kl;
pub mod merge;
pub mod pearson;
pub mod weight_report;

use std::path::Path;

use anyhow::Context;
use weightlab_core::tensor::read_archive;
use weightlab_core::Checkpoint;

pub(crate) fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    read_archive(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Label derived from a file name: the stem up to the first dot.
pub(crate) fn stem_label(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.split_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem.to_string(),
        _ => name,
    }
}
