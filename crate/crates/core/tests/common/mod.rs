#![allow(dead_code)]

use std::path::Path;

use uniugg_core::conditioner::ConditionerConfig;
use uniugg_core::diffusion::{DenoiserConfig, ScheduleConfig};
use uniugg_core::encoder::EncoderConfig;
use uniugg_core::geometry::SceneConfig;
use uniugg_core::harness::{RunConfig, Stage};
use uniugg_core::model::ModelConfig;
use uniugg_core::spatial_decoder::DecoderConfig;
use uniugg_core::spatial_vae::VaeConfig;

/// Smallest configuration that exercises every module: 16×16 images and a
/// 2×2 token grid.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { image_height: 16, image_width: 16, patch_size: 8, dim: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        decoder: DecoderConfig { dim: 16, depth: 1, heads: 2, descriptor_dim: 8, mlp_ratio: 2, shared_branches: false },
        vae: VaeConfig { hidden: 8, width: 8, blocks: 1, heads: 2, mlp_ratio: 2 },
        conditioner: ConditionerConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2, vocab: 48, max_text_len: 16 },
        denoiser: DenoiserConfig { dim: 16, depth: 1, heads: 2, mlp_ratio: 2 },
        schedule: ScheduleConfig { steps: 10, beta_start: 1e-3, beta_end: 0.2 },
    }
}

pub fn tiny_run(stage: Stage, out: &Path, steps: u64) -> RunConfig {
    let mut c = RunConfig::toy(stage);
    c.model = tiny_model();
    c.dataset.scene = SceneConfig { width: 16, height: 16, min_correspondences: 8, ..SceneConfig::default() };
    c.dataset.n_pairs = 3;
    c.optimizer.batch_size = 2;
    c.optimizer.total_steps = steps;
    c.optimizer.base_lr = Some(1e-3);
    c.loss.kd_fraction = 0.5;
    c.out_dir = out.to_path_buf();
    c.log_every = 0;
    c
}

/// Runs every stage for `steps` steps and returns the config of the last.
pub fn run_all(out: &Path, steps: u64) -> RunConfig {
    let mut prev: Option<std::path::PathBuf> = None;
    let mut last = None;
    for stage in [Stage::EncoderPretrain, Stage::Vae, Stage::UnifiedS1, Stage::UnifiedS2, Stage::UnifiedS3] {
        let mut c = tiny_run(stage, out, steps);
        c.init_checkpoint = prev.clone();
        let o = uniugg_core::harness::run_stage(&c).unwrap();
        prev = Some(o.checkpoint);
        last = Some(c);
    }
    last.unwrap()
}
