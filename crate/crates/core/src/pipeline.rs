//! Inference: reference image + relative pose → generated target-view
//! tokens → pointmaps of both views; VQA over real or generated tokens;
//! scene-level evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::conditioner::{stack_raymaps, vqa_generate, Vocab};
use crate::diffusion::{sample, SampleMode};
use crate::encoder::{self, TokenGrid};
use crate::error::Result;
use crate::eval::{aligned_chamfer, depth_metrics, export_ply, DepthReport, ScalingMode};
use crate::geometry::{plucker_raymap, pointmap_to_depth, Image, Intrinsics, Pose, ScenePair};
use crate::model::{latent_scale, require_prefixes, Model, LATENT_SCALE};
use crate::nn::{Ctx, ParamStore};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::spatial_decoder::{self, SpatialPrediction};
use crate::tensor::Tensor;
use crate::{conditioner, diffusion, spatial_vae};

/// Everything [`generate_scene`] needs in the parameter store.
pub const GENERATION_PREFIXES: [&str; 7] = [
    encoder::PREFIX,
    encoder::RGB_PREFIX,
    spatial_decoder::PREFIX,
    spatial_vae::PREFIX,
    conditioner::PREFIX,
    diffusion::PREFIX,
    LATENT_SCALE,
];

#[derive(Clone, Debug)]
pub struct Generation<T> {
    pub z_ref: TokenGrid<T>,
    /// Sampled latent in normalized units, `[L_h, L_w, 4]`.
    pub latent: Tensor<T>,
    pub z_gen: TokenGrid<T>,
    /// Reference view decoded against itself; does not depend on the seed.
    pub reference: SpatialPrediction<T>,
    /// Generated view decoded against the reference, in the reference frame.
    pub generated: SpatialPrediction<T>,
    /// RGB head applied to the generated tokens, `[H, W, 3]`.
    pub generated_rgb: Tensor<T>,
}

/// Conditioning features `[1, N, d_c]` for a reference grid and the
/// camera-i → camera-j transform `rel_pose`.
pub fn conditioning<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, z_ref: &TokenGrid<T>, rel_pose: &Pose, intrinsics: &Intrinsics) -> Result<Tensor<T>> {
    let (ht, wt) = model.cfg.encoder.grid();
    let rays = stack_raymaps::<T>(&[plucker_raymap(intrinsics, &rel_pose.inverse(), ht, wt)?])?;
    let g = Graph::new();
    let cx = Ctx::frozen(&g, params);
    let q = model.conditioner.queries(&cx, &rays)?;
    let z = g.constant(z_ref.flat().reshape(vec![1, ht * wt, z_ref.dim()]));
    let c = model.conditioner.condition(&cx, z, q)?;
    let out = g.value(c).clone();
    Ok(out)
}

/// Decodes a normalized latent into tokens and both views' predictions.
pub fn decode_latent_view<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, z_ref: TokenGrid<T>, latent: Tensor<T>) -> Result<Generation<T>> {
    let inv = T::lit(1.0 / latent_scale(params)?);
    let z_gen = model.vae.decode_latent(params, &latent.map(|v| v * inv))?;
    let (reference, _) = model.decoder.predict(params, &z_ref, &z_ref)?;
    let (_, generated) = model.decoder.predict(params, &z_ref, &z_gen)?;
    let generated_rgb = model.rgb_head.reconstruct(params, &z_gen)?;
    Ok(Generation { z_ref, latent, z_gen, reference, generated, generated_rgb })
}

/// encode → raymap → queries → condition → sample → VAE decode → decode pair.
pub fn generate_scene<T: Scalar>(
    model: &Model<T>,
    params: &ParamStore<T>,
    ref_image: &Image,
    rel_pose: &Pose,
    intrinsics: &Intrinsics,
    seed: u64,
    mode: SampleMode,
) -> Result<Generation<T>> {
    require_prefixes(params, &GENERATION_PREFIXES)?;
    let z_ref = model.encode_image(params, ref_image)?;
    let cond = conditioning(model, params, &z_ref, rel_pose, intrinsics)?;
    let shape = model.latent_shape();
    let x = sample(&model.denoiser, params, &cond, &[1, shape[0], shape[1], shape[2]], &model.schedule, seed, mode)?;
    decode_latent_view(model, params, z_ref, x.reshape(shape.to_vec()))
}

/// The same decoding path fed a standard normal latent instead of a sample.
pub fn random_latent_baseline<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, ref_image: &Image, seed: u64) -> Result<Generation<T>> {
    require_prefixes(params, &GENERATION_PREFIXES)?;
    let z_ref = model.encode_image(params, ref_image)?;
    let latent = Tensor::randn(model.latent_shape().to_vec(), 1.0, &mut seeded(seed));
    decode_latent_view(model, params, z_ref, latent)
}

/// Greedy answer to `question` (token ids) about a real or generated grid.
pub fn describe_scene<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, z: &TokenGrid<T>, question: &[usize]) -> Result<Vec<usize>> {
    let max_len = model.cfg.conditioner.max_text_len.saturating_sub(question.len() + 1).max(1);
    vqa_generate(&model.conditioner, params, z, question, max_len)
}

/// Writes `ref_pointmap.ply` and `gen_pointmap.ply` under `dir`.
pub fn write_generation<T: Scalar>(generation: &Generation<T>, ref_image: &Image, dir: &Path, conf_threshold: f64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let f = |t: &Tensor<T>| t.to_f64_vec();
    let r = dir.join("ref_pointmap.ply");
    export_ply(&r, &f(&generation.reference.pointmap), &ref_image.data, &f(&generation.reference.confidence), conf_threshold)?;
    let g = dir.join("gen_pointmap.ply");
    export_ply(&g, &f(&generation.generated.pointmap), &f(&generation.generated_rgb), &f(&generation.generated.confidence), conf_threshold)?;
    Ok((r, g))
}

pub fn write_answer(dir: &Path, answer: &[usize]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("answer.txt");
    fs::write(&path, format!("{}\n", Vocab::standard().decode(answer)))?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub seed: u64,
    /// View i reconstructed from real tokens of both views.
    pub depth: DepthReport,
    /// View j reconstructed from real tokens, vs its ground truth.
    pub recon_chamfer: f64,
    /// Mean over sampling seeds, when the store can generate.
    pub gen_chamfer: Option<f64>,
    pub baseline_chamfer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneReport>,
    pub mean_abs_rel: f64,
    pub mean_delta_125: f64,
    pub mean_recon_chamfer: f64,
    pub mean_gen_chamfer: Option<f64>,
    pub mean_baseline_chamfer: Option<f64>,
}

/// Chamfer of a predicted view-j pointmap against the pair's ground truth,
/// each normalized by its mean norm over the valid mask.
pub fn target_chamfer<T: Scalar>(pred: &SpatialPrediction<T>, pair: &ScenePair) -> Result<f64> {
    aligned_chamfer(&pred.pointmap.to_f64_vec(), &pair.gt_pointmap_ji, &pair.valid_mask_j)
}

pub fn evaluate_scene<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, pair: &ScenePair, gen_seeds: &[u64]) -> Result<SceneReport> {
    let zi = model.encode_image(params, &pair.image_i)?;
    let zj = model.encode_image(params, &pair.image_j)?;
    let (pi, pj) = model.decoder.predict(params, &zi, &zj)?;
    let pred = pointmap_to_depth(&pi.pointmap.to_f64_vec(), &pair.valid_mask_i);
    let gt = pointmap_to_depth(&pair.gt_pointmap_ii, &pair.valid_mask_i);
    let depth = depth_metrics(&pred.values, &gt.values, &gt.valid, ScalingMode::PerFrameMedian)?;
    let recon_chamfer = target_chamfer(&pj, pair)?;
    let can_generate = GENERATION_PREFIXES.iter().all(|p| params.has_prefix(p));
    let (mut gen_chamfer, mut baseline_chamfer) = (None, None);
    if can_generate && !gen_seeds.is_empty() {
        let (mut a, mut b) = (0.0, 0.0);
        for &s in gen_seeds {
            let gen = generate_scene(model, params, &pair.image_i, &pair.relative(), &pair.intrinsics, s, SampleMode::Ancestral)?;
            a += target_chamfer(&gen.generated, pair)?;
            let base = random_latent_baseline(model, params, &pair.image_i, s)?;
            b += target_chamfer(&base.generated, pair)?;
        }
        gen_chamfer = Some(a / gen_seeds.len() as f64);
        baseline_chamfer = Some(b / gen_seeds.len() as f64);
    }
    Ok(SceneReport { seed: pair.seed, depth, recon_chamfer, gen_chamfer, baseline_chamfer })
}

pub fn evaluate<T: Scalar>(model: &Model<T>, params: &ParamStore<T>, pairs: &[ScenePair], gen_seeds: &[u64]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return crate::error::invalid("nothing to evaluate");
    }
    let scenes = pairs.iter().map(|p| evaluate_scene(model, params, p, gen_seeds)).collect::<Result<Vec<_>>>()?;
    let n = scenes.len() as f64;
    let mean = |f: &dyn Fn(&SceneReport) -> f64| scenes.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&SceneReport) -> Option<f64>| scenes.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
    Ok(EvalReport {
        mean_abs_rel: mean(&|s| s.depth.abs_rel),
        mean_delta_125: mean(&|s| s.depth.delta_125),
        mean_recon_chamfer: mean(&|s| s.recon_chamfer),
        mean_gen_chamfer: mean_opt(&|s| s.gen_chamfer),
        mean_baseline_chamfer: mean_opt(&|s| s.baseline_chamfer),
        scenes,
    })
}
