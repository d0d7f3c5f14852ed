use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::LoraConfig;
use crate::backbone::{BackboneRegistry, BackboneSpec};
use crate::error::{Error, Result};
use crate::splits::{CrossDomainParams, ScalingParams};
use crate::train::{SamplerPolicy, TrainConfig};

/// Which standard-deviation estimator aggregated tables report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

/// Experiment configuration file. Section names follow the component
/// types: `[train]`, `[lora]`, `[sampler]`, `[scaling]`, `[crossdomain]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Seed for plan generation; session seeds derive from it and `train.seed`.
    pub seed: u64,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub sampler: SamplerPolicy,
    pub scaling: ScalingParams,
    pub crossdomain: CrossDomainParams,
    /// Decision threshold on the positive-class probability.
    pub threshold: f64,
    pub std: StdKind,
    /// Weight-source overrides keyed by model name.
    pub weights: BTreeMap<String, String>,
    /// Additional backbone specs registered before the run.
    pub backbones: Vec<BackboneSpec>,
    /// Restricts the cross-domain sweep to these training domains.
    pub train_domains: Option<Vec<String>>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            sampler: SamplerPolicy::default(),
            scaling: ScalingParams::default(),
            crossdomain: CrossDomainParams::default(),
            threshold: 0.5,
            std: StdKind::Population,
            weights: BTreeMap::new(),
            backbones: Vec::new(),
            train_domains: None,
        }
    }
}

impl BenchConfig {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Parse {
            what: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let cfg: BenchConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: "config".into(),
                message: e.to_string(),
            })?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::parse_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold", "must lie in [0, 1]"));
        }
        if self.lora.rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        Ok(())
    }

    /// Built-in registry plus the config's extra backbones.
    pub fn registry(&self) -> Result<BackboneRegistry> {
        let mut reg = BackboneRegistry::with_builtins();
        for spec in &self.backbones {
            reg.register(spec.clone())?;
        }
        Ok(reg)
    }
}
