//! The desk-scale toy chain trained once and shared by the learning criteria.

use std::path::{Path, PathBuf};
use std::time::Instant;

use uniugg_core::diffusion::SampleMode;
use uniugg_core::geometry::Pose;
use uniugg_core::harness::{read_metrics, run_stage, Checkpoint, Dataset, RunConfig, Stage};
use uniugg_core::model::Model;
use uniugg_core::pipeline::{describe_scene, evaluate, generate_scene, EvalReport};
use uniugg_core::eval::aligned_chamfer;
use uniugg_core::{ParamStore32, Tensor32};

/// `(stage, steps, learning rate)`.
pub const SCHEDULE: [(Stage, u64, f64); 5] = [
    (Stage::EncoderPretrain, 1500, 3e-3),
    (Stage::Vae, 1200, 2e-3),
    (Stage::UnifiedS1, 200, 1e-3),
    (Stage::UnifiedS2, 3000, 1e-3),
    (Stage::UnifiedS3, 1500, 5e-4),
];

pub struct StageRun {
    pub stage: Stage,
    pub steps: u64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

pub fn config(stage: Stage, out: &Path, steps: u64, lr: f64, init: Option<PathBuf>) -> RunConfig {
    let mut c = RunConfig::toy(stage);
    c.out_dir = out.to_path_buf();
    // plain L_s training: the distillation term is off for the overfit runs
    c.loss.kd_weight = 0.0;
    c.optimizer.total_steps = steps;
    c.optimizer.base_lr = Some(lr);
    c.init_checkpoint = init;
    c.log_every = 0;
    c
}

pub fn train_chain(out: &Path) -> Vec<StageRun> {
    let mut prev = None;
    let mut runs = Vec::new();
    for (stage, steps, lr) in SCHEDULE {
        let t = Instant::now();
        let o = run_stage(&config(stage, out, steps, lr, prev.clone())).unwrap();
        let m = read_metrics(&o.metrics).unwrap();
        assert_eq!(m.len() as u64, steps);
        runs.push(StageRun { stage, steps, seconds: t.elapsed().as_secs_f64(), checkpoint: o.checkpoint.clone() });
        prev = Some(o.checkpoint);
    }
    runs
}

pub struct Loaded {
    pub seed: u64,
    pub model: Model<f32>,
    pub params: ParamStore32,
    pub data: Dataset,
}

pub fn load(path: &Path) -> Loaded {
    let ck = Checkpoint::load(path).unwrap();
    Loaded { seed: ck.config.seed, model: Model::new(&ck.config.model).unwrap(), data: Dataset::from_config(&ck.config.dataset).unwrap(), params: ck.params }
}

pub fn report(l: &Loaded, seeds: &[u64]) -> EvalReport {
    evaluate(&l.model, &l.params, &l.data.pairs, seeds).unwrap()
}

fn mse(a: &Tensor32, b: &Tensor32) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

/// Mean-latent reconstruction MSE of the view-i token grids of every pair.
pub fn vae_mse(l: &Loaded, vae_params: &ParamStore32) -> f64 {
    let mut total = 0.0;
    for p in &l.data.pairs {
        let z = l.model.encode_image(&l.params, &p.image_i).unwrap();
        let d = l.model.vae.encode_grid(vae_params, &z).unwrap();
        let r = l.model.vae.decode_latent(vae_params, &d.mean).unwrap();
        total += mse(&z.tokens, &r.tokens);
    }
    total / l.data.pairs.len() as f64
}

/// The VAE stage's store with the VAE put back to its initial state.
pub fn vae_at_init(l: &Loaded) -> ParamStore32 {
    let mut s = l.params.clone();
    l.model.init_module(&mut s, "vae", l.seed).unwrap();
    s
}

pub struct VqaScore {
    pub gated_correct: usize,
    pub gated_total: usize,
    pub all_correct: usize,
    pub all_total: usize,
    /// Answers on generated view-j grids that match the answer on real ones.
    pub generated_agree: usize,
}

/// Gated set: scene k asked the question kind `k mod 3`.
pub fn vqa(l: &Loaded) -> VqaScore {
    let kinds = l.data.qa.len() / l.data.pairs.len();
    let mut s = VqaScore { gated_correct: 0, gated_total: 0, all_correct: 0, all_total: 0, generated_agree: 0 };
    for (k, (i, qa)) in l.data.qa.iter().enumerate() {
        let p = &l.data.pairs[*i];
        let z = l.model.encode_image(&l.params, &p.image_i).unwrap();
        let a = describe_scene(&l.model, &l.params, &z, &qa.question_ids).unwrap();
        let ok = a == qa.answer();
        s.all_total += 1;
        s.all_correct += ok as usize;
        if k % kinds == *i % kinds {
            s.gated_total += 1;
            s.gated_correct += ok as usize;
            let g = generate_scene(&l.model, &l.params, &p.image_i, &p.relative(), &p.intrinsics, 0, SampleMode::Ancestral).unwrap();
            s.generated_agree += (describe_scene(&l.model, &l.params, &g.z_gen, &qa.question_ids).unwrap() == a) as usize;
        }
    }
    s
}

/// Chamfer between the generated pointmap for an identity relative pose and
/// the reference pointmap, averaged over scenes.
pub fn identity_consistency(l: &Loaded) -> f64 {
    let mut total = 0.0;
    for p in &l.data.pairs {
        let g = generate_scene(&l.model, &l.params, &p.image_i, &Pose::identity(), &p.intrinsics, 0, SampleMode::Ancestral).unwrap();
        let mask = vec![true; p.valid_mask_i.len()];
        let r = g.reference.pointmap.to_f64_vec();
        total += aligned_chamfer(&g.generated.pointmap.to_f64_vec(), &r, &mask).unwrap();
    }
    total / l.data.pairs.len() as f64
}
