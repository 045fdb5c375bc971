//! Stage runner: encoder pretraining, Spatial-VAE training and the three
//! unified stages, with per-step JSONL metrics and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioner::{alignment_target, vqa_loss, QaExample, VISION_PROJ};
use crate::diffusion::{draw_training_noise, gen_loss};
use crate::distill::{kd_loss_subsets, sample_token_subset, subset_seed, TeacherStub, DEFAULT_TEACHER_SEED};
use crate::error::{Error, Result};
use crate::model::{require_prefixes, Model, LATENT_SCALE};
use crate::nn::{Ctx, ParamStore, Trainable};
use crate::optim::{clip_grad_norm, cosine_lr, grad_norm, AdamW};
use crate::rng::{mix, stream};
use crate::spatial_decoder::{spatial_objective, SpatialBatch};
use crate::spatial_vae::vae_objective;
use crate::tensor::Tensor;
use crate::{conditioner, diffusion, encoder, spatial_decoder, spatial_vae};

pub use checkpoint::Checkpoint;
pub use config::{DatasetConfig, LossWeights, OptimizerConfig, RunConfig, Stage};
pub use data::{batch_indices, Dataset};

/// Conditioner parameters optimized in unified stages 2 and 3: everything
/// except the vision projector.
pub const COND_BODY: [&str; 7] = ["cond.query", "cond.embed", "cond.pos_", "cond.mode", "cond.blocks", "cond.norm", "cond.lm_head"];

impl Stage {
    /// Parameter prefixes that must be present in the init checkpoint.
    pub fn required(self) -> Vec<&'static str> {
        let base = [encoder::PREFIX, encoder::RGB_PREFIX, spatial_decoder::PREFIX];
        match self {
            Stage::EncoderPretrain => vec![],
            Stage::Vae => base.to_vec(),
            Stage::UnifiedS1 => [&base[..], &[spatial_vae::PREFIX]].concat(),
            Stage::UnifiedS2 => [&base[..], &[spatial_vae::PREFIX, VISION_PROJ]].concat(),
            Stage::UnifiedS3 => [&base[..], &[spatial_vae::PREFIX, conditioner::PREFIX, diffusion::PREFIX]].concat(),
        }
    }

    /// Modules freshly initialized when absent.
    pub fn introduces(self) -> Vec<&'static str> {
        match self {
            Stage::EncoderPretrain => vec![encoder::PREFIX, encoder::RGB_PREFIX, spatial_decoder::PREFIX],
            Stage::Vae => vec![spatial_vae::PREFIX],
            Stage::UnifiedS1 => vec![conditioner::PREFIX],
            Stage::UnifiedS2 => vec![diffusion::PREFIX],
            Stage::UnifiedS3 => vec![],
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            Stage::EncoderPretrain => Trainable::prefixes(&[encoder::PREFIX, encoder::RGB_PREFIX, spatial_decoder::PREFIX]),
            Stage::Vae => Trainable::prefixes(&[spatial_vae::PREFIX, spatial_decoder::PREFIX]),
            Stage::UnifiedS1 => Trainable::prefixes(&[VISION_PROJ]),
            Stage::UnifiedS2 | Stage::UnifiedS3 => {
                let mut p: Vec<&str> = COND_BODY.to_vec();
                p.push(diffusion::PREFIX);
                Trainable::prefixes(&p)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<MetricsLine>,
}

fn load_init(cfg: &RunConfig, model: &Model<f32>) -> Result<(ParamStore<f32>, AdamW<f32>, u64)> {
    let stage = cfg.stage;
    let mut opt = AdamW::new(cfg.optimizer.adamw());
    let mut start = 0;
    let mut params = match &cfg.init_checkpoint {
        None if stage == Stage::EncoderPretrain && !cfg.resume => ParamStore::new(),
        None => {
            return Err(Error::Config(format!("stage {} needs init_checkpoint", stage.name())));
        }
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("prerequisite checkpoint {} not found", path.display())));
            }
            let ck = Checkpoint::load(path)?;
            if ck.config.model != cfg.model {
                return Err(Error::Config(format!("model configuration of {} differs from the run's", path.display())));
            }
            if cfg.resume {
                if ck.config.stage != stage {
                    return Err(Error::Config(format!("cannot resume stage {} from a {} checkpoint", stage.name(), ck.config.stage.name())));
                }
                let saved = ck.optimizer.ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume".into()))?;
                opt.step = saved.step;
                opt.m = saved.m;
                opt.v = saved.v;
                start = ck.step;
            }
            ck.params
        }
    };
    require_prefixes(&params, &stage.required())?;
    for m in stage.introduces() {
        if !params.has_prefix(m) {
            model.init_module(&mut params, m, cfg.seed)?;
        }
    }
    Ok((params, opt, start))
}

fn stack(items: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack(&items)
}

/// Per-stage data prepared once: frozen token grids, targets and caches.
enum Objective {
    Pretrain { teacher: Option<Vec<Tensor<f32>>> },
    Vae,
    Align { tokens: Vec<Tensor<f32>>, targets: Vec<Tensor<f32>> },
    Unified { z_ref: Vec<Tensor<f32>>, latents: Vec<Tensor<f32>>, rays: Vec<Tensor<f32>>, vqa: bool },
}

/// `1 / std` of the latent means of both views over the dataset.
pub fn compute_latent_scale(model: &Model<f32>, params: &ParamStore<f32>, data: &Dataset) -> Result<f64> {
    let mut vals = Vec::new();
    for p in &data.pairs {
        for img in [&p.image_i, &p.image_j] {
            let z = model.encode_image(params, img)?;
            vals.extend(model.vae.encode_grid(params, &z)?.mean.data().iter().map(|v| *v as f64));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Numeric(format!("latent standard deviation {std} cannot be normalized")));
    }
    Ok(1.0 / std)
}

/// Frozen inputs of the unified stages: reference tokens, scaled target
/// latents and raymaps of the target camera seen from the reference.
pub fn unified_inputs(model: &Model<f32>, params: &ParamStore<f32>, data: &Dataset) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let scale = crate::model::latent_scale(params)? as f32;
    let (ht, wt) = model.cfg.encoder.grid();
    let (mut z_ref, mut latents, mut rays) = (Vec::new(), Vec::new(), Vec::new());
    for p in &data.pairs {
        z_ref.push(model.encode_image(params, &p.image_i)?.flat());
        let zj = model.encode_image(params, &p.image_j)?;
        latents.push(model.vae.encode_grid(params, &zj)?.mean.map(|v| v * scale));
        let rm = crate::geometry::plucker_raymap(&p.intrinsics, &p.relative().inverse(), ht, wt)?;
        rays.push(Tensor::from_f64(vec![ht, wt, 6], &rm.data));
    }
    Ok((z_ref, latents, rays))
}

impl Objective {
    fn new(cfg: &RunConfig, model: &Model<f32>, params: &mut ParamStore<f32>, data: &Dataset) -> Result<Self> {
        Ok(match cfg.stage {
            Stage::EncoderPretrain => {
                let teacher = if cfg.loss.kd_weight > 0.0 {
                    let t = TeacherStub::<f32>::new(&cfg.model.encoder, DEFAULT_TEACHER_SEED)?;
                    let mut feats = Vec::with_capacity(2 * data.pairs.len());
                    for p in &data.pairs {
                        for img in [&p.image_i, &p.image_j] {
                            let x = img.to_tensor::<f32>();
                            let s = x.shape().to_vec();
                            let f = t.features(&x.reshape(vec![1, s[0], s[1], s[2]]))?;
                            let fs = f.shape().to_vec();
                            feats.push(f.reshape(vec![fs[1], fs[2]]));
                        }
                    }
                    Some(feats)
                } else {
                    None
                };
                Objective::Pretrain { teacher }
            }
            Stage::Vae => Objective::Vae,
            Stage::UnifiedS1 => {
                let teacher = TeacherStub::<f32>::new(&cfg.model.encoder, DEFAULT_TEACHER_SEED)?;
                let (mut tokens, mut targets) = (Vec::new(), Vec::new());
                for p in &data.pairs {
                    for img in [&p.image_i, &p.image_j] {
                        tokens.push(model.encode_image(params, img)?.flat());
                        let x = img.to_tensor::<f32>();
                        let s = x.shape().to_vec();
                        let f = teacher.features(&x.reshape(vec![1, s[0], s[1], s[2]]))?;
                        let fs = f.shape().to_vec();
                        let f = f.reshape(vec![fs[1], fs[2]]);
                        targets.push(alignment_target(&f, cfg.model.conditioner.dim, stream(cfg.seed, "align.projection")));
                    }
                }
                if !params.contains(LATENT_SCALE) {
                    let s = compute_latent_scale(model, params, data)?;
                    params.insert(LATENT_SCALE, Tensor::from_vec(vec![1], vec![s as f32]));
                }
                Objective::Align { tokens, targets }
            }
            Stage::UnifiedS2 | Stage::UnifiedS3 => {
                if !params.contains(LATENT_SCALE) {
                    let s = compute_latent_scale(model, params, data)?;
                    params.insert(LATENT_SCALE, Tensor::from_vec(vec![1], vec![s as f32]));
                }
                let (z_ref, latents, rays) = unified_inputs(model, params, data)?;
                let vqa = cfg.stage == Stage::UnifiedS3;
                if vqa && data.qa.is_empty() {
                    return Err(Error::Config("stage 3 needs question-answer examples".into()));
                }
                Objective::Unified { z_ref, latents, rays, vqa }
            }
        })
    }

    /// Loss of `step` and its named components.
    fn loss(&self, cx: &Ctx<f32>, cfg: &RunConfig, model: &Model<f32>, data: &Dataset, step: u64) -> Result<(Var, Vec<(&'static str, Var)>)> {
        let g = cx.g;
        let bs = cfg.optimizer.batch_size;
        let idx = batch_indices(step, bs, data.pairs.len());
        let w = &cfg.loss;
        match self {
            Objective::Pretrain { teacher } => {
                let pairs: Vec<_> = idx.iter().map(|&i| &data.pairs[i]).collect();
                let batch = SpatialBatch::<f32>::new(&pairs, &cfg.model.encoder)?;
                let f = spatial_objective(cx, &model.encoder, &model.rgb_head, &model.decoder, &batch, &w.spatial(), &w.rgb(), &model.proxy)?;
                let p = f.parts;
                let mut parts = vec![("conf_i", p.conf_i), ("conf_j", p.conf_j), ("match", p.matching), ("rgb", p.rgb), ("spatial", p.total)];
                let mut total = p.total;
                if let Some(feats) = teacher {
                    let z = g.concat(&[f.z_i, f.z_j], 0);
                    let zh: Vec<Tensor<f32>> = [0, 1].iter().flat_map(|&v| idx.iter().map(move |&i| feats[2 * i + v].clone())).collect();
                    let zh = g.constant(stack(zh)?);
                    let n = cfg.model.encoder.num_tokens();
                    let base = subset_seed(step, cfg.seed);
                    let subsets = (0..2 * bs).map(|b| sample_token_subset(n, w.kd_fraction, mix(base, b as u64))).collect::<Result<Vec<_>>>()?;
                    let kd = kd_loss_subsets(g, z, zh, &subsets, w.alpha, w.beta)?;
                    parts.push(("kd", kd));
                    total = g.add(total, g.scale(kd, w.kd_weight as f32));
                }
                Ok((total, parts))
            }
            Objective::Vae => {
                let pairs: Vec<_> = idx.iter().map(|&i| &data.pairs[i]).collect();
                let batch = SpatialBatch::<f32>::new(&pairs, &cfg.model.encoder)?;
                let seed = mix(stream(cfg.seed, "vae.noise"), step);
                let f = vae_objective(cx, &model.encoder, &model.rgb_head, &model.decoder, &model.vae, &batch, &w.spatial(), &w.rgb(), &model.proxy, &w.vae(), seed)?;
                let p = f.parts;
                let s = p.spatial;
                Ok((p.total, vec![("conf_i", s.conf_i), ("conf_j", s.conf_j), ("match", s.matching), ("rgb", s.rgb), ("spatial", s.total), ("mse", p.mse), ("kl", p.kl)]))
            }
            Objective::Align { tokens, targets } => {
                let idx = batch_indices(step, bs, tokens.len());
                let z = g.constant(stack(idx.iter().map(|&i| tokens[i].clone()).collect())?);
                let y = g.constant(stack(idx.iter().map(|&i| targets[i].clone()).collect())?);
                let p = model.conditioner.project_vision(cx, z);
                let align = g.mean(g.square(g.sub(p, y)));
                Ok((align, vec![("align", align)]))
            }
            Objective::Unified { z_ref, latents, rays, vqa } => {
                let zr = g.constant(stack(idx.iter().map(|&i| z_ref[i].clone()).collect())?);
                let rm = stack(idx.iter().map(|&i| rays[i].clone()).collect())?;
                let x0 = stack(idx.iter().map(|&i| latents[i].clone()).collect())?;
                let q = model.conditioner.queries(cx, &rm)?;
                let c = model.conditioner.condition(cx, zr, q)?;
                let (t, eps) = draw_training_noise::<f32>(x0.shape(), model.schedule.steps(), mix(stream(cfg.seed, "gen.noise"), step));
                let gen = gen_loss(cx, &model.denoiser, &x0, c, &t, &eps, &model.schedule)?;
                let mut parts = vec![("gen", gen)];
                let mut total = g.scale(gen, w.gen_weight as f32);
                if *vqa {
                    let qi = batch_indices(step, bs, data.qa.len());
                    let mut acc: Option<Var> = None;
                    for &k in &qi {
                        let (pi, ex): &(usize, QaExample) = &data.qa[k];
                        let z = g.constant(z_ref[*pi].clone().reshape({
                            let s = z_ref[*pi].shape();
                            vec![1, s[0], s[1]]
                        }));
                        let l = vqa_loss(cx, &model.conditioner, z, &ex.question_ids, &ex.answer_ids)?;
                        acc = Some(match acc {
                            None => l,
                            Some(a) => g.add(a, l),
                        });
                    }
                    let v = g.scale(acc.expect("batch_size >= 1"), 1.0 / qi.len() as f32);
                    parts.push(("vqa", v));
                    total = g.add(total, g.scale(v, w.vqa_weight as f32));
                }
                Ok((total, parts))
            }
        }
    }
}

/// Runs one stage to `total_steps`, writing `<stage>_metrics.jsonl` and
/// `<stage>.ckpt` under `out_dir`.
pub fn run_stage(cfg: &RunConfig) -> Result<StageOutput> {
    cfg.validate()?;
    let model = Model::<f32>::new(&cfg.model)?;
    let data = Dataset::from_config(&cfg.dataset)?;
    let (mut params, mut opt, start) = load_init(cfg, &model)?;
    let objective = Objective::new(cfg, &model, &mut params, &data)?;
    let trainable = cfg.stage.trainable();
    let frozen: Vec<(String, Tensor<f32>)> = params.iter().filter(|(k, _)| !trainable.includes(k)).map(|(k, v)| (k.clone(), v.clone())).collect();

    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.metrics_path();
    let mut log = BufWriter::new(fs::File::create(&metrics_path)?);
    let total = cfg.optimizer.total_steps;
    let base_lr = cfg.base_lr();
    let mut last = None;
    for step in start..total {
        let lr = cosine_lr(step, total, cfg.optimizer.warmup_ratio, base_lr);
        let g = Graph::<f32>::new();
        let cx = Ctx::new(&g, &params, trainable.clone());
        let (loss, parts) = objective.loss(&cx, cfg, &model, &data, step)?;
        let value = g.item(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at step {step} of stage {}", cfg.stage.name())));
        }
        let mut values: BTreeMap<String, f64> = parts.iter().map(|(k, v)| (k.to_string(), g.item(*v) as f64)).collect();
        let mut grads = cx.collect_grads(g.backward(loss));
        drop(cx);
        let norm = match cfg.optimizer.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grad_norm(&grads),
        };
        opt.update(&mut params, &grads, lr).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} (step {step})")),
            other => other,
        })?;
        values.insert("loss".into(), value);
        values.insert("lr".into(), lr);
        values.insert("grad_norm".into(), norm);
        let line = MetricsLine { step, values };
        writeln!(log, "{}", serde_json::to_string(&line)?)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            log::info!("{} step {step}/{total} loss {value:.5} lr {lr:.3e}", cfg.stage.name());
        }
        last = Some(line);
        if let Some(k) = cfg.checkpoint_every {
            if (step + 1) % k == 0 && step + 1 < total {
                log.flush()?;
                let ck = Checkpoint { step: step + 1, config: cfg.clone(), params: params.clone(), optimizer: Some(opt.clone()) };
                ck.save(&cfg.out_dir.join(format!("{}_step{}.ckpt", cfg.stage.name(), step + 1)))?;
            }
        }
    }
    log.flush()?;
    for (k, v) in &frozen {
        if params.get(k) != Some(v) {
            return Err(Error::Numeric(format!("frozen parameter {k} changed during stage {}", cfg.stage.name())));
        }
    }
    let ck = Checkpoint { step: total.max(start), config: cfg.clone(), params, optimizer: Some(opt) };
    let path = cfg.checkpoint_path();
    ck.save(&path)?;
    Ok(StageOutput { checkpoint: path, metrics: metrics_path, last })
}

pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsLine>> {
    fs::read_to_string(path)?.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
