//! TOML configuration files for the command-line interface.
//!
//! A config file has up to five sections -- `[suite]`, `[model]`,
//! `[train]`, `[measure]`, `[experiment]` -- whose keys mirror the typed
//! configs of the library modules. Every key is optional; builder methods
//! apply the documented defaults (see the defaults table in the README)
//! before validating. Unknown sections or keys are rejected, and
//! parse -> serialize -> parse is stable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ExperimentPlan;
use crate::datagen::{
    default_manifest, DomainSpec, SplitCounts, SuiteManifest, DEFAULT_GEN_SEED,
    DEFAULT_PROTOTYPES_SEED,
};
use crate::measures::{AlphaSharpnessConfig, SharpnessConfig, DEFAULT_MEASURE_SEED};
use crate::objectives::{Objective, TrainConfig};

/// Seed used when neither flag, environment, nor file provides one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config has no [{0}] section")]
    MissingSection(&'static str),
    #[error("invalid config value: {0}")]
    BadValue(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    /// Full domain list (first entry must be the anchor); replaces the
    /// default 1 + 14 layout when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<DomainSpec>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascent_coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_target_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ascent_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_search_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_hi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Objective names to run; defaults to all four.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_noise: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

/// A parsed configuration file; every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSection>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parse; toml's errors carry line and key diagnostics.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Suite manifest with defaults applied; `gen_seed_override` implements
    /// the seed precedence chain for data generation.
    pub fn suite_manifest(&self, gen_seed_override: Option<u64>) -> SuiteManifest {
        let mut manifest = default_manifest(DEFAULT_PROTOTYPES_SEED, DEFAULT_GEN_SEED);
        if let Some(s) = &self.suite {
            if let Some(v) = s.num_classes {
                manifest.num_classes = v;
            }
            if let Some(v) = s.input_dim {
                manifest.input_dim = v;
            }
            if let Some(v) = s.prototypes_seed {
                manifest.prototypes_seed = v;
            }
            if let Some(v) = s.gen_seed {
                manifest.gen_seed = v;
            }
            let c = &mut manifest.counts;
            *c = SplitCounts {
                train: s.train.unwrap_or(c.train),
                val: s.val.unwrap_or(c.val),
                test: s.test.unwrap_or(c.test),
            };
            if let Some(d) = &s.domains {
                manifest.domains = d.clone();
            }
        }
        if let Some(seed) = gen_seed_override {
            manifest.gen_seed = seed;
        }
        manifest
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.model
            .as_ref()
            .and_then(|m| m.hidden_dims.clone())
            .unwrap_or_else(|| vec![16])
    }

    pub fn model_init_seed(&self) -> Option<u64> {
        self.model.as_ref().and_then(|m| m.init_seed)
    }

    /// The `[train]` seed, if the file sets one.
    pub fn file_train_seed(&self) -> Option<u64> {
        self.train.as_ref().and_then(|t| t.seed)
    }

    /// The `[measure]` seed, if the file sets one.
    pub fn file_measure_seed(&self) -> Option<u64> {
        self.measure.as_ref().and_then(|m| m.seed)
    }

    /// Training config with defaults applied. `seed` is the already
    /// resolved seed (flag > env > file > default); `objective_override`
    /// is the `--objective` flag.
    pub fn train_config(
        &self,
        seed: u64,
        objective_override: Option<Objective>,
    ) -> Result<TrainConfig, ConfigError> {
        let objective = match objective_override {
            Some(o) => o,
            None => match self.train.as_ref().and_then(|t| t.objective.as_deref()) {
                Some(name) => name
                    .parse()
                    .map_err(|e: String| ConfigError::BadValue(e))?,
                None => Objective::Baseline,
            },
        };
        let mut cfg = TrainConfig::defaults(objective, seed);
        if let Some(t) = &self.train {
            if let Some(v) = t.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = t.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = t.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = t.weight_decay {
                cfg.weight_decay = v;
            }
            if let Some(v) = t.sam_rho {
                cfg.sam_rho = v;
            }
            if let Some(v) = t.fisher_lambda {
                cfg.fisher_lambda = v;
            }
            if let Some(v) = t.consistency_lambda {
                cfg.consistency_lambda = v;
            }
            if let Some(v) = t.view_noise_sigma {
                cfg.view_noise_sigma = v;
            }
        }
        cfg.validate()
            .map_err(|e| ConfigError::BadValue(e.to_string()))?;
        Ok(cfg)
    }

    pub fn sharpness_config(&self, seed: u64) -> Result<SharpnessConfig, ConfigError> {
        let mut cfg = SharpnessConfig::defaults(seed);
        if let Some(m) = &self.measure {
            if let Some(v) = m.noise_scale {
                cfg.noise_scale = v;
            }
            if let Some(v) = m.ascent_coeff {
                cfg.ascent_coeff = v;
            }
            if let Some(v) = m.radius_lambda {
                cfg.radius_lambda = v;
            }
            if let Some(v) = m.batch_size {
                cfg.batch_size = v;
            }
        }
        cfg.validate()
            .map_err(|e| ConfigError::BadValue(e.to_string()))?;
        Ok(cfg)
    }

    pub fn alpha_config(&self, seed: u64) -> Result<AlphaSharpnessConfig, ConfigError> {
        let mut cfg = AlphaSharpnessConfig::defaults(seed);
        if let Some(m) = &self.measure {
            if let Some(v) = m.loss_target_offset {
                cfg.loss_target_offset = v;
            }
            if let Some(v) = m.ascent_steps {
                cfg.ascent_steps = v;
            }
            if let Some(v) = m.binary_search_iters {
                cfg.binary_search_iters = v;
            }
            if let Some(v) = m.alpha_lo {
                cfg.alpha_lo = v;
            }
            if let Some(v) = m.alpha_hi {
                cfg.alpha_hi = v;
            }
        }
        cfg.validate()
            .map_err(|e| ConfigError::BadValue(e.to_string()))?;
        Ok(cfg)
    }

    /// Assemble the full experiment plan: `[train]` is the hyperparameter
    /// template, `[experiment].objectives` selects which objectives run
    /// (default all four), and seeds default to 0..8.
    pub fn experiment_plan(&self) -> Result<ExperimentPlan, ConfigError> {
        let objective_names: Vec<String> = match self
            .experiment
            .as_ref()
            .and_then(|e| e.objectives.clone())
        {
            Some(names) => names,
            None => Objective::ALL.iter().map(|o| o.name().to_string()).collect(),
        };
        let mut objectives = Vec::with_capacity(objective_names.len());
        for name in &objective_names {
            let objective: Objective = name
                .parse()
                .map_err(|e: String| ConfigError::BadValue(e))?;
            objectives.push(self.train_config(0, Some(objective))?);
        }
        let seeds = self
            .experiment
            .as_ref()
            .and_then(|e| e.seeds.clone())
            .unwrap_or_else(|| (0..8).collect());
        let measure_seed = self.file_measure_seed().unwrap_or(DEFAULT_MEASURE_SEED);
        Ok(ExperimentPlan {
            suite: self.suite_manifest(None),
            hidden_dims: self.hidden_dims(),
            objectives,
            seeds,
            sharpness: self.sharpness_config(measure_seed)?,
            alpha: self.alpha_config(measure_seed)?,
            sweep_noise: self
                .experiment
                .as_ref()
                .and_then(|e| e.sweep_noise)
                .unwrap_or(false),
            output_dir: self
                .experiment
                .as_ref()
                .and_then(|e| e.output_dir.clone())
                .unwrap_or_else(|| "experiment-out".into()),
        })
    }
}
