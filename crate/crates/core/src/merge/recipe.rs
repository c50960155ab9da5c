use serde::{Deserialize, Serialize};

use super::kernels::check_drop;
use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    #[serde(alias = "ta")]
    TaskArithmetic,
    Ties,
    Sce,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Sce => "sce",
        }
    }

    pub fn needs_anchor(self) -> bool {
        !matches!(self, MergeMethod::Average)
    }
}

/// Drop-and-rescale applied to every task vector before merging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DareConfig {
    pub drop_p: f64,
    pub seed: u64,
}

/// Dtype of merged tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDType {
    /// Same dtype as the corresponding anchor (or first model) tensor.
    #[default]
    Anchor,
    Bf16,
    F32,
}

impl OutputDType {
    pub fn resolve(self, reference: DType) -> DType {
        match self {
            OutputDType::Anchor => reference,
            OutputDType::Bf16 => DType::BF16,
            OutputDType::F32 => DType::F32,
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_DENSITY: f64 = 0.2;
pub const DEFAULT_SELECT_TAU: f64 = 0.1;
pub const DEFAULT_DROP_P: f64 = 0.8;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_density() -> f64 {
    DEFAULT_DENSITY
}
fn default_select_tau() -> f64 {
    DEFAULT_SELECT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_density")]
    pub density_k: f64,
    #[serde(default = "default_select_tau")]
    pub select_tau: f64,
    #[serde(default)]
    pub dare: Option<DareConfig>,
    #[serde(default)]
    pub anchor_id: String,
    pub model_ids: Vec<String>,
    #[serde(default)]
    pub output_dtype: OutputDType,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod, anchor_id: impl Into<String>, model_ids: Vec<String>) -> Self {
        Self {
            method,
            lambda: DEFAULT_LAMBDA,
            density_k: DEFAULT_DENSITY,
            select_tau: DEFAULT_SELECT_TAU,
            dare: None,
            anchor_id: anchor_id.into(),
            model_ids,
            output_dtype: OutputDType::Anchor,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_density(mut self, density_k: f64) -> Self {
        self.density_k = density_k;
        self
    }

    pub fn with_select_tau(mut self, select_tau: f64) -> Self {
        self.select_tau = select_tau;
        self
    }

    pub fn with_dare(mut self, drop_p: f64, seed: u64) -> Self {
        self.dare = Some(DareConfig { drop_p, seed });
        self
    }

    pub fn with_output_dtype(mut self, output_dtype: OutputDType) -> Self {
        self.output_dtype = output_dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_ids.is_empty() {
            return Err(Error::EmptyInput("model_ids"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::param("lambda", format!("{} is not a positive real", self.lambda)));
        }
        if !(self.density_k > 0.0 && self.density_k <= 1.0) {
            return Err(Error::param("density_k", format!("{} is outside (0, 1]", self.density_k)));
        }
        if !(self.select_tau > 0.0 && self.select_tau <= 1.0) {
            return Err(Error::param("select_tau", format!("{} is outside (0, 1]", self.select_tau)));
        }
        if let Some(d) = &self.dare {
            check_drop(d.drop_p)?;
            if self.method == MergeMethod::Average && self.anchor_id.is_empty() {
                return Err(Error::param("dare", "average with DARE needs an anchor"));
            }
        }
        if self.method.needs_anchor() && self.anchor_id.is_empty() {
            return Err(Error::param("anchor_id", format!("{} needs an anchor", self.method.name())));
        }
        Ok(())
    }
}
