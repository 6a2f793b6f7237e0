//! Run configuration: a strict TOML schema covering the schedule, model
//! dimensions, sampler, corpus, and training hyperparameters. Unknown keys
//! are rejected, and every command echoes the parsed config into its
//! output directory.

use crate::datagen::OpKind;
use crate::error::{Error, Result};
use crate::inference::SamplerConfig;
use crate::model::ModelConfig;
use crate::schedule::{ScaleSchedule, Strategy};
use crate::train::TrainHyper;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleCfg {
    pub resolution: usize,
    /// Required for resolutions other than 256 and 512.
    #[serde(default)]
    pub grids: Option<Vec<(usize, usize)>>,
}

impl ScheduleCfg {
    pub fn to_schedule(&self) -> Result<ScaleSchedule> {
        match &self.grids {
            Some(grids) => ScaleSchedule::with_grids(self.resolution, grids.clone()),
            None => ScaleSchedule::for_resolution(self.resolution),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub text_width: usize,
    pub text_vocab: usize,
}

fn default_ops() -> BTreeMap<OpKind, f64> {
    OpKind::ALL.iter().map(|&k| (k, 0.25)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusCfg {
    /// Directory with a manifest to read instead of synthesizing.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    pub count: u64,
    pub holdout: u64,
    #[serde(default = "default_ops")]
    pub ops: BTreeMap<OpKind, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub strategy: Strategy,
    pub schedule: ScheduleCfg,
    pub model: ModelCfg,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub corpus: CorpusCfg,
    #[serde(default)]
    pub train: TrainHyper,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.to_schedule()?;
        self.model_config_with(self.strategy, &schedule)?.validate()?;
        self.sampler.validate()?;
        if self.corpus.count == 0 {
            return Err(Error::Config("corpus count must be positive".into()));
        }
        if self.corpus.ops.values().all(|&w| w <= 0.0) {
            return Err(Error::Config("op proportions must not all be zero".into()));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(Error::Config("train steps and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.cfg_dropout) {
            return Err(Error::Config("cfg_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let schedule = self.schedule.to_schedule()?;
        self.model_config_with(self.strategy, &schedule)
    }

    pub fn model_config_with(
        &self,
        strategy: Strategy,
        schedule: &ScaleSchedule,
    ) -> Result<ModelConfig> {
        Ok(ModelConfig {
            width: self.model.width,
            layers: self.model.layers,
            heads: self.model.heads,
            codebook_size: self.model.codebook_size,
            codebook_dim: self.model.codebook_dim,
            text_width: self.model.text_width,
            text_vocab: self.model.text_vocab,
            strategy,
            schedule: schedule.clone(),
            seed: self.seed,
        })
    }

    /// A variant of this config with another strategy and output directory,
    /// as the ablation runner needs.
    pub fn with_strategy(&self, strategy: Strategy, out_dir: PathBuf) -> RunConfig {
        let mut cfg = self.clone();
        cfg.strategy = strategy;
        cfg.out_dir = out_dir;
        cfg
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config echo encode: {e}")))?;
        let path = dir.join("config_echo.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
