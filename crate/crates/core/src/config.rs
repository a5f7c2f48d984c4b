//! The run configuration document: one TOML file covering dataset paths,
//! preprocessing divisors, model architecture, training hyperparameters,
//! q-space split seeds and output locations. Unknown keys are rejected so a
//! typo cannot silently fall back to a default; every default is printable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::shmath::ShFitOptions;
use crate::trainer::{SsimOptions, TrainRunConfig};

/// Input file locations for `preprocess`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub data: String,
    pub bvecs: String,
    pub bvals: String,
    pub mask: String,
    /// Members within this many s/mm² of a nominal b-value join its shell.
    pub shell_tolerance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            data: "data.nii".into(),
            bvecs: "bvecs".into(),
            bvals: "bvals".into(),
            mask: "mask.nii".into(),
            shell_tolerance: 100.0,
        }
    }
}

/// Preprocessing switches. Divisor keys are shell b-values as strings
/// (TOML table keys), e.g. `"1000" = 4000.0`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub denoise: bool,
    pub divisors: BTreeMap<String, f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let mut divisors = BTreeMap::new();
        divisors.insert("1000".to_string(), 4000.0);
        divisors.insert("2000".to_string(), 3000.0);
        divisors.insert("3000".to_string(), 2000.0);
        PreprocessConfig {
            denoise: true,
            divisors,
        }
    }
}

impl PreprocessConfig {
    /// Divisors keyed by numeric shell b-value.
    pub fn divisor_map(&self) -> Result<BTreeMap<i64, f64>> {
        let mut out = BTreeMap::new();
        for (k, &v) in &self.divisors {
            let key: f64 = k
                .parse()
                .map_err(|_| Error::Config(format!("divisor key '{k}' is not a number")))?;
            out.insert(key.round() as i64, v);
        }
        Ok(out)
    }
}

/// Inference-time split parameters (training draws its own per epoch).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Seed of the held-out context/target split.
    pub split_seed: u64,
    /// Shell to super-resolve.
    pub shell: i64,
    /// Patches per forward pass.
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            split_seed: 1,
            shell: 1000,
            batch_size: 8,
        }
    }
}

/// Spherical-harmonic fit options in config form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ShConfig {
    pub l_max: usize,
    pub condition_cap: f64,
    pub use_qr: bool,
}

impl Default for ShConfig {
    fn default() -> Self {
        ShConfig {
            l_max: 2,
            condition_cap: 1e8,
            use_qr: false,
        }
    }
}

impl ShConfig {
    pub fn fit_options(&self, context: &str) -> ShFitOptions {
        ShFitOptions {
            condition_cap: self.condition_cap,
            use_qr: self.use_qr,
            context: context.to_string(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainRunConfig,
    pub infer: InferConfig,
    pub sh: ShConfig,
    pub ssim: SsimOptions,
    pub phantom: PhantomSpec,
    /// Output directory; subcommands write into it.
    pub output: String,
    /// Worker threads for parallel stages; 0 means all available cores.
    pub threads: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
