use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioner::QuestionKind;
use crate::encoder::RgbLossConfig;
use crate::error::{invalid, Result};
use crate::geometry::SceneConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::spatial_decoder::SpatialLossConfig;
use crate::spatial_vae::VaeLossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EncoderPretrain,
    Vae,
    UnifiedS1,
    UnifiedS2,
    UnifiedS3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::EncoderPretrain => "encoder_pretrain",
            Stage::Vae => "vae",
            Stage::UnifiedS1 => "unified_s1",
            Stage::UnifiedS2 => "unified_s2",
            Stage::UnifiedS3 => "unified_s3",
        }
    }

    pub fn unified(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::UnifiedS1),
            2 => Ok(Stage::UnifiedS2),
            3 => Ok(Stage::UnifiedS3),
            _ => invalid(format!("unified stage must be 1, 2 or 3, got {n}")),
        }
    }

    /// Default learning rates: 1e-3 for the first stage of a
    /// pipeline, 2e-5 for unified stages 2 and 3.
    pub fn default_lr(self) -> f64 {
        match self {
            Stage::UnifiedS2 | Stage::UnifiedS3 => 2e-5,
            _ => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// `None` takes [`Stage::default_lr`].
    pub base_lr: Option<f64>,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: None,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            batch_size: 8,
            total_steps: 1000,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Every loss weight of every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Distillation: direction and L1 terms.
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of tokens per image entering the distillation loss.
    pub kd_fraction: f64,
    /// Weight of the distillation loss next to `L_s`; 0 skips the teacher.
    pub kd_weight: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub use_l2: bool,
    pub lambda_l2: f64,
    pub use_ssim: bool,
    pub lambda_ssim: f64,
    pub gamma: f64,
    pub mse_both_views: bool,
    pub alpha_conf: f64,
    pub tau: f64,
    pub gen_weight: f64,
    pub vqa_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        let rgb = RgbLossConfig::default();
        let sp = SpatialLossConfig::default();
        let vae = VaeLossConfig::default();
        Self {
            alpha: 0.9,
            beta: 0.1,
            kd_fraction: 0.5,
            kd_weight: 1.0,
            lambda1: sp.lambda_match,
            lambda2: sp.lambda_rgb,
            lambda_l1: rgb.lambda_l1,
            lambda_perc: rgb.lambda_perc,
            use_l2: rgb.use_l2,
            lambda_l2: rgb.lambda_l2,
            use_ssim: rgb.use_ssim,
            lambda_ssim: rgb.lambda_ssim,
            gamma: vae.gamma,
            mse_both_views: vae.mse_both_views,
            alpha_conf: sp.alpha_conf,
            tau: sp.tau,
            gen_weight: 1.0,
            vqa_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn spatial(&self) -> SpatialLossConfig {
        SpatialLossConfig { alpha_conf: self.alpha_conf, tau: self.tau, lambda_match: self.lambda1, lambda_rgb: self.lambda2 }
    }

    pub fn rgb(&self) -> RgbLossConfig {
        RgbLossConfig {
            lambda_l1: self.lambda_l1,
            lambda_perc: self.lambda_perc,
            use_l2: self.use_l2,
            lambda_l2: self.lambda_l2,
            use_ssim: self.use_ssim,
            lambda_ssim: self.lambda_ssim,
        }
    }

    pub fn vae(&self) -> VaeLossConfig {
        VaeLossConfig { gamma: self.gamma, mse_both_views: self.mse_both_views }
    }

    fn named(&self) -> [(&'static str, f64); 16] {
        [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("kd_fraction", self.kd_fraction),
            ("kd_weight", self.kd_weight),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_l1", self.lambda_l1),
            ("lambda_perc", self.lambda_perc),
            ("lambda_l2", self.lambda_l2),
            ("lambda_ssim", self.lambda_ssim),
            ("gamma", self.gamma),
            ("alpha_conf", self.alpha_conf),
            ("tau", self.tau),
            ("gen_weight", self.gen_weight),
            ("vqa_weight", self.vqa_weight),
            ("kd_fraction_upper", 1.0 - self.kd_fraction),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Directory written by `gen-data`; `None` generates pairs in memory.
    pub dir: Option<PathBuf>,
    pub n_pairs: usize,
    pub first_seed: u64,
    pub scene: SceneConfig,
    /// Question templates used when the dataset has no `qa.jsonl`.
    pub question_kinds: Vec<QuestionKind>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_pairs: 8,
            first_seed: 0,
            scene: SceneConfig::default(),
            question_kinds: vec![QuestionKind::Direction, QuestionKind::Depth, QuestionKind::Count],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: Stage,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub dataset: DatasetConfig,
    /// Output of the previous stage (or of this stage, with `resume`).
    pub init_checkpoint: Option<PathBuf>,
    /// Continue the checkpoint's own stage from its step and optimizer state.
    pub resume: bool,
    pub out_dir: PathBuf,
    /// Also save `<stage>_step<k>.ckpt` every `k` steps.
    pub checkpoint_every: Option<u64>,
    /// Console log period in steps; 0 disables.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: Stage::EncoderPretrain,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            dataset: DatasetConfig::default(),
            init_checkpoint: None,
            resume: false,
            out_dir: PathBuf::from("runs"),
            checkpoint_every: None,
            log_every: 100,
        }
    }
}

impl RunConfig {
    /// Toy model and scenes at the model's image size.
    pub fn toy(stage: Stage) -> Self {
        let model = ModelConfig::toy();
        let scene = SceneConfig { width: model.encoder.image_width, height: model.encoder.image_height, ..SceneConfig::default() };
        Self { stage, model, dataset: DatasetConfig { scene, ..DatasetConfig::default() }, ..Self::default() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn base_lr(&self) -> f64 {
        self.optimizer.base_lr.unwrap_or(self.stage.default_lr())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt", self.stage.name()))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_metrics.jsonl", self.stage.name()))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.warmup_ratio) {
            return invalid(format!("warmup_ratio must be in [0, 1), got {}", o.warmup_ratio));
        }
        if o.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.base_lr() >= 0.0) || !(o.weight_decay >= 0.0) {
            return invalid("learning rate and weight decay must be nonnegative");
        }
        if let Some(c) = o.clip_norm {
            if !(c > 0.0) {
                return invalid("clip_norm must be positive");
            }
        }
        for (name, w) in self.loss.named() {
            if !(w >= 0.0) {
                return invalid(format!("loss weight {name} must be nonnegative, got {w}"));
            }
        }
        if !(self.loss.kd_fraction > 0.0) {
            return invalid("kd_fraction must be in (0, 1]");
        }
        if !(self.loss.tau > 0.0) {
            return invalid("tau must be positive");
        }
        if self.dataset.dir.is_none() && self.dataset.n_pairs == 0 {
            return invalid("dataset needs at least one pair");
        }
        if self.checkpoint_every == Some(0) {
            return invalid("checkpoint_every must be positive");
        }
        Ok(())
    }
}
