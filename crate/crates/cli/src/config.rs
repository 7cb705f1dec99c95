use std::path::Path;

use anyhow::{bail, Context, Result};
use nilm_core::bench::DatasetConfig;
use nilm_core::decompose::VaeConfig;
use nilm_core::eval::BaselineConfig;
use nilm_core::preprocess::PreprocessConfig;
use nilm_core::rng::derive_seed;
use nilm_core::signature::SignatureConfig;
use nilm_core::synth::{standard_profiles, ApplianceProfile};
use nilm_core::train::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub signature: SignatureConfig,
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    pub ssl_segments: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            signature: m.signature,
            conv_channels: m.conv_channels,
            hidden: m.hidden,
            ssl_segments: m.ssl_segments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_ewc: f64,
    pub ssl_epochs: usize,
    pub threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda_ewc: t.lambda_ewc,
            ssl_epochs: t.ssl_epochs,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub window: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeConfig::default();
        Self {
            window: v.window,
            d_z: v.d_z,
            hidden: v.hidden,
            epochs: v.epochs,
            lr: v.lr,
            batch_size: v.batch_size,
            kl_weight: v.kl_weight,
        }
    }
}

/// Every tunable of a run. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub profiles: Vec<ApplianceProfile>,
    /// `null` picks the defaults for the dataset's sampling rate
    pub preprocess: Option<PreprocessConfig>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub baseline: BaselineConfig,
    pub vae: VaeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetConfig::default(),
            profiles: standard_profiles(),
            preprocess: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
            baseline: BaselineConfig::default(),
            vae: VaeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        for p in &self.profiles {
            p.validate()?;
        }
        let pre = self.preprocess(self.dataset.fs);
        pre.filter.validate(self.dataset.fs)?;
        if pre.n_cyc != self.model.signature.n_cyc {
            bail!(
                "preprocess.n_cyc = {} but model.signature.n_cyc = {}",
                pre.n_cyc,
                self.model.signature.n_cyc
            );
        }
        self.model_config(self.profiles.len().max(1)).validate()?;
        self.train_config().validate()?;
        self.vae_config().validate()?;
        let th = self.train.threshold;
        if !(th > 0.0 && th < 1.0) {
            bail!("train.threshold must lie in (0, 1), got {th}");
        }
        Ok(())
    }

    pub fn preprocess(&self, fs: f64) -> PreprocessConfig {
        self.preprocess.unwrap_or_else(|| PreprocessConfig::default_for(fs))
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            signature: self.model.signature.clone(),
            conv_channels: self.model.conv_channels.clone(),
            hidden: self.model.hidden,
            num_classes,
            ssl_segments: self.model.ssl_segments,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lambda_ewc: self.train.lambda_ewc,
            seed: self.stage_seed("train"),
            ssl_epochs: self.train.ssl_epochs,
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        let v = &self.vae;
        VaeConfig {
            window: v.window,
            d_z: v.d_z,
            hidden: v.hidden,
            epochs: v.epochs,
            lr: v.lr,
            batch_size: v.batch_size,
            kl_weight: v.kl_weight,
            seed: self.stage_seed("vae"),
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}
