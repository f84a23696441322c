use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{template_category, CaptionKind, DEFAULT_TEMPLATE};
use crate::encoders::{TeacherStrategy, TextEncoderConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::evalsuite::EvalConfig;
use crate::losses::{LossWeights, Stage};
use crate::optim::AdamWConfig;
use crate::params::hex;
use crate::regionfeat::{CropMethod, RegionMode, DEFAULT_SCALE_RANGE};

/// Where region-category pairs of a step come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// Objects of the images in the current batch.
    #[default]
    InBatch,
    /// Objects of any image in the dataset.
    Shard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub teacher: TeacherStrategy,
    pub text_frozen: bool,
    pub crop_method: CropMethod,
    pub crops_per_image: usize,
    pub crop_scale: (f64, f64),
    pub loss_weights: LossWeights,
    pub region_mode: RegionMode,
    pub regions_per_batch: usize,
    pub region_source: RegionSource,
    pub caption_kind: CaptionKind,
    pub template: String,
    /// Also compute the other stage's auxiliary loss.
    pub allow_off_stage: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate before the first step and after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::S1,
            learning_rate: 1e-3,
            epochs: 10,
            weight_decay: 0.1,
            warmup_steps: 10,
            batch_size: 8,
            seed: 0,
            teacher: TeacherStrategy::Online,
            text_frozen: false,
            crop_method: CropMethod::Random,
            crops_per_image: 4,
            crop_scale: DEFAULT_SCALE_RANGE,
            loss_weights: LossWeights::default(),
            region_mode: RegionMode::RoiEmbedding,
            regions_per_batch: 16,
            region_source: RegionSource::InBatch,
            caption_kind: CaptionKind::Short,
            template: DEFAULT_TEMPLATE.to_string(),
            allow_off_stage: false,
            clip_grad_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            eval_each_epoch: true,
        }
    }
}

pub const PRESETS: [&str; 6] = ["toy-s1", "toy-s2", "paper-s1", "paper-s2", "analysis-rs5m", "analysis-mgrs"];

impl TrainConfig {
    /// Named hyperparameter sets. `paper-*` are the two-stage recipe for
    /// pretrained weights, `analysis-*` the ablation settings; batch sizes
    /// are global.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let (stage, lr, epochs, wd, warmup, batch) = match name {
            "toy-s1" => (Stage::S1, 1e-3, 10, 0.1, 10, 8),
            "toy-s2" => (Stage::S2, 1e-3, 10, 0.1, 10, 8),
            "paper-s1" => (Stage::S1, 1e-6, 1, 1.0, 1000, 40),
            "paper-s2" => (Stage::S2, 4e-9, 10, 1.0, 250, 40),
            "analysis-rs5m" => (Stage::S1, 1e-6, 1, 0.1, 1000, 40),
            "analysis-mgrs" => (Stage::S2, 4e-7, 10, 1.0, 250, 40),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}, expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            stage,
            learning_rate: lr,
            epochs,
            weight_decay: wd,
            warmup_steps: warmup,
            batch_size: batch,
            ..base
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.crops_per_image == 0 {
            return bad("crops_per_image must be at least 1".into());
        }
        if self.regions_per_batch < 2 {
            return bad("regions_per_batch must be at least 2".into());
        }
        if [self.weight_decay, self.clip_grad_norm].iter().any(|x| x.is_nan() || *x < 0.0) {
            return bad("weight_decay and clip_grad_norm must be non-negative".into());
        }
        if self.crop_method == CropMethod::Grid {
            let g = (self.crops_per_image as f64).sqrt().round() as usize;
            if g * g != self.crops_per_image {
                return bad(format!("grid cropping needs a square crop count, got {}", self.crops_per_image));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale));
        }
        if let TeacherStrategy::Ema { momentum } = self.teacher {
            if !(0.0..=1.0).contains(&momentum) {
                return bad(format!("EMA momentum {momentum} outside [0, 1]"));
            }
        }
        self.loss_weights.validate()?;
        template_category("x", &self.template)?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_grad_norm > 0.0).then_some(self.clip_grad_norm),
        }
    }

    /// Which losses a step computes: `(glo, loc, dis)`.
    pub fn components(&self) -> (bool, bool, bool) {
        match (self.stage, self.allow_off_stage) {
            (_, true) => (true, true, true),
            (Stage::S1, false) => (true, false, true),
            (Stage::S2, false) => (true, true, false),
        }
    }

    /// Steps per epoch: full batches plus a trailing batch of at least 2.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.batch_size + usize::from(n % self.batch_size >= 2)) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub shared_temperature: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            shared_temperature: true,
        }
    }
}

/// Everything that determines a training run's numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.vision.validate()?;
        self.model.text.validate()?;
        if self.model.vision.embed_dim != self.model.text.embed_dim {
            return Err(Error::Config("vision and text embed_dim differ".into()));
        }
        self.eval.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}
