//! The run configuration: one JSON document, every field defaulted, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridpool::CPPoolConfig;
use crate::losses::{FinetuneWeights, HOICLConfig, PretrainWeights};
use crate::model::{Mode, ModelConfig};
use crate::sim::{ContactConfig, SensorModel};
use crate::temporal::{CTRefineConfig, CTRefineTrainConfig, FilterConfig};
use crate::types::{GridConfig, KeypointProfile};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "HOIL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Final learning rate of the cosine schedule as a fraction of the base.
    pub min_lr_ratio: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub checkpoint_every_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_pretrain: 3e-4,
            lr_finetune: 5e-4,
            batch: 8,
            weight_decay: 0.01,
            epochs: 50,
            min_lr_ratio: 0.0,
            max_steps: None,
            checkpoint_every_epochs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_pretrain > 0.0) || !(self.lr_finetune > 0.0) {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::invalid("weight_decay must be >= 0 and min_lr_ratio in [0, 1]"));
        }
        if self.batch == 0 || self.epochs == 0 || self.checkpoint_every_epochs == 0 {
            return Err(Error::invalid("batch, epochs and checkpoint_every_epochs must be > 0"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max_steps must be > 0 when set"));
        }
        Ok(())
    }

    pub fn lr(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Pretrain => self.lr_pretrain,
            Mode::Finetune => self.lr_finetune,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub sensor: SensorModel,
    /// Upper bound on points kept per frame after cropping.
    pub points: usize,
    /// Margin added around the scene bounds before cropping.
    pub crop_margin: f64,
    pub object_dropout: f64,
    pub dt: f64,
    /// Seconds per gait cycle.
    pub gait_period: f64,
    /// Uniform jitter of the body position (metres) and heading (radians).
    pub position_jitter: f64,
    pub yaw_jitter: f64,
    pub distance: f64,
    pub profile: KeypointProfile,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sensor: SensorModel::default(),
            points: 128,
            crop_margin: 0.3,
            object_dropout: 0.5,
            dt: 0.1,
            gait_period: 1.2,
            position_jitter: 0.5,
            yaw_jitter: 0.3,
            distance: 7.0,
            profile: KeypointProfile::Smpl15Obj,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.points == 0 {
            return Err(Error::invalid("sim.points must be > 0"));
        }
        if !(self.crop_margin >= 0.0) || !(0.0..=1.0).contains(&self.object_dropout) {
            return Err(Error::invalid("crop_margin must be >= 0 and object_dropout in [0, 1]"));
        }
        if !(self.dt > 0.0) || !(self.gait_period > 0.0) || !(self.distance > 0.0) {
            return Err(Error::invalid("dt, gait_period and distance must be > 0"));
        }
        if !(self.position_jitter >= 0.0) || !(self.yaw_jitter >= 0.0) {
            return Err(Error::invalid("jitter must be >= 0"));
        }
        if self.profile == KeypointProfile::Waymo14 {
            return Err(Error::invalid("the simulator emits SMPL15 or SMPL15_OBJ keypoints"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Sequence directories used when the command line names none.
    pub data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSettings {
    /// Feed ground-truth keypoint contact to CTRefine instead of the
    /// network's prediction.
    pub oracle_contact: bool,
    pub model: CTRefineConfig,
    pub train: CTRefineTrainConfig,
}

impl Default for RefineSettings {
    fn default() -> Self {
        RefineSettings {
            oracle_contact: false,
            model: CTRefineConfig::default(),
            train: CTRefineTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Phase run by `hoil train`.
    pub mode: Mode,
    pub model: ModelConfig,
    pub cppool: CPPoolConfig,
    pub hoicl: HOICLConfig,
    pub contact: ContactConfig,
    pub filters: FilterConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain_weights: PretrainWeights,
    pub finetune_weights: FinetuneWeights,
    pub seed: u64,
    pub paths: PathsConfig,
    /// Sampling ratio per data source; empty means equal ratios.
    pub dataset_mix: Vec<f64>,
    pub sim: SimConfig,
    pub refine: RefineSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Pretrain,
            model: ModelConfig {
                grid: GridConfig {
                    base_grid_size: 0.05,
                    ..GridConfig::default()
                },
                ..ModelConfig::default()
            },
            cppool: CPPoolConfig::default(),
            hoicl: HOICLConfig::default(),
            contact: ContactConfig::default(),
            filters: FilterConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain_weights: PretrainWeights::default(),
            finetune_weights: FinetuneWeights::default(),
            seed: 0,
            paths: PathsConfig::default(),
            dataset_mix: Vec::new(),
            sim: SimConfig::default(),
            refine: RefineSettings::default(),
        }
    }
}

fn finite_nonneg(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!("{name} weights must be finite and >= 0")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies the seed override
    /// from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cppool.validate()?;
        self.hoicl.validate()?;
        self.contact.validate()?;
        self.filters.validate()?;
        self.optimizer.validate()?;
        self.sim.validate()?;
        let w = &self.pretrain_weights;
        finite_nonneg("pretrain", &[w.seg, w.contact, w.coord, w.keypoint_contact, w.hoicl, w.cppool])?;
        let f = &self.finetune_weights;
        finite_nonneg("finetune", &[f.heatmap, f.limb, f.limb_direction, f.limb_length])?;
        if self.dataset_mix.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("dataset_mix ratios must be finite and >= 0"));
        }
        if !self.dataset_mix.is_empty() && self.dataset_mix.iter().all(|&r| r == 0.0) {
            return Err(Error::invalid("dataset_mix ratios are all zero"));
        }
        for p in self.paths.data.iter().chain(&self.paths.checkpoint) {
            if !p.exists() {
                return Err(Error::Missing(format!("configured path {}", p.display())));
            }
        }
        Ok(())
    }
}
