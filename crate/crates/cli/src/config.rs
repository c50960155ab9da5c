//! Folding flags and JSON config files into one set of run parameters.
//!
//! A config file is a flat JSON object whose keys are the snake_case names of
//! the command's flags (`density_k`, `select_tau`, `target_dim`, ...) plus the
//! shared keys `seed`, `threads` and `out_dir`. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::Common;

/// A bad invocation: missing or conflicting flags, or an unreadable config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Shared parameters after merging flags with the config file, plus the
/// command-specific part of the file still to be deserialized.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub seed_flag: Option<u64>,
    pub seed_file: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub file: Map<String, Value>,
}

impl Settings {
    pub fn load(common: &Common) -> anyhow::Result<Self> {
        let mut file = match &common.config {
            Some(path) => read_config(path)?,
            None => Map::new(),
        };
        let seed_file = take(&mut file, "seed")?;
        let threads_file = take(&mut file, "threads")?;
        let out_dir_file: Option<PathBuf> = take(&mut file, "out_dir")?;
        Ok(Self {
            seed_flag: common.seed,
            seed_file,
            threads: common.threads.or(threads_file),
            out_dir: common
                .out_dir
                .clone()
                .or(out_dir_file)
                .unwrap_or_else(|| PathBuf::from(".")),
            file,
        })
    }

    /// The run seed: flag, then config file, then 0.
    pub fn seed(&self) -> u64 {
        self.seed_flag.or(self.seed_file).unwrap_or(0)
    }

    /// Deserialize the command-specific keys of the config file.
    pub fn file_args<T: DeserializeOwned + Default>(&self) -> anyhow::Result<T> {
        if self.file.is_empty() {
            return Ok(T::default());
        }
        serde_json::from_value(Value::Object(self.file.clone())).map_err(|e| usage(format!("config file: {e}")))
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn read_config(path: &Path) -> anyhow::Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(usage(format!("config file {} is not a JSON object", path.display()))),
        Err(e) => Err(usage(format!("config file {}: {e}", path.display()))),
    }
}

fn take<T: DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> anyhow::Result<Option<T>> {
    map.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| usage(format!("config key `{key}`: {e}"))))
        .transpose()
}

/// Fill every `None` field of `flags` from `file`.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($field:ident),+ $(,)?) => {{
        let (mut flags, file) = ($flags, $file);
        $(
            if flags.$field.is_none() {
                flags.$field = file.$field;
            }
        )+
        flags
    }};
}
pub(crate) use overlay;

/// Unwrap a required parameter or fail with a usage error naming its flag.
pub fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| usage(format!("missing required parameter {flag}")))
}

/// Parse a `name=value` pair.
pub fn key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got `{s}`")),
    }
}
