//! Analytic gradients against central differences, and the additivity of
//! the assembled objectives.

use uniugg_core::autodiff::{Graph, Var};
use uniugg_core::conditioner::{vqa_loss, Vocab};
use uniugg_core::diffusion::{gen_loss, make_schedule};
use uniugg_core::distill::kd_loss;
use uniugg_core::encoder::{rgb_loss, EncoderConfig, RgbLossConfig};
use uniugg_core::geometry::{generate_scene_pair, SceneConfig, ScenePair};
use uniugg_core::gradcheck::{self, GradReport};
use uniugg_core::harness::LossWeights;
use uniugg_core::model::{Model, ModelConfig};
use uniugg_core::nn::{Ctx, ParamStore, Trainable};
use uniugg_core::rng::seeded;
use uniugg_core::spatial_decoder::{conf_loss, match_loss, spatial_objective, DecoderConfig, SpatialBatch};
use uniugg_core::spatial_vae::{kl_loss, vae_objective, VaeConfig, VaeLossConfig};
use uniugg_core::conditioner::ConditionerConfig;
use uniugg_core::diffusion::{DenoiserConfig, ScheduleConfig};
use uniugg_core::Tensor;

const H: f64 = 1e-6;
const COORDS: usize = 24;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut seeded(seed))
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { image_height: 16, image_width: 16, patch_size: 8, dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
        decoder: DecoderConfig { dim: 8, depth: 1, heads: 2, descriptor_dim: 4, mlp_ratio: 2, shared_branches: false },
        vae: VaeConfig { hidden: 8, width: 4, blocks: 1, heads: 2, mlp_ratio: 2 },
        conditioner: ConditionerConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2, vocab: 48, max_text_len: 16 },
        denoiser: DenoiserConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2 },
        schedule: ScheduleConfig { steps: 10, beta_start: 1e-3, beta_end: 0.2 },
    }
}

pub fn small_setup(seed: u64) -> (Model<f64>, ParamStore<f64>, Vec<ScenePair>) {
    let cfg = small_model();
    let model = Model::new(&cfg).unwrap();
    let mut store = ParamStore::new();
    for p in ["encoder", "rgb_head", "spatial_decoder", "vae", "cond", "denoiser"] {
        model.init_module(&mut store, p, seed).unwrap();
    }
    let scene = SceneConfig { width: 16, height: 16, min_correspondences: 8, ..SceneConfig::default() };
    let pairs = (0..2).map(|k| generate_scene_pair(seed + k, &scene).unwrap()).collect();
    (model, store, pairs)
}

/// First weight under each prefix.
fn pick(store: &ParamStore<f64>, prefixes: &[&str]) -> Vec<String> {
    prefixes
        .iter()
        .map(|p| store.names().find(|n| n.starts_with(p) && n.ends_with("weight")).unwrap_or_else(|| panic!("no weight under {p}")).clone())
        .collect()
}

/// Checks `f` with respect to the named parameters followed by `extra`.
fn check_params(
    store: &ParamStore<f64>,
    names: &[String],
    extra: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&Ctx<f64>, &[Var]) -> Var,
) -> GradReport {
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    inputs.extend(extra.iter().cloned());
    gradcheck::check(
        &inputs,
        |g, vars| {
            let cx = Ctx::new(g, store, Trainable::Nothing);
            for (n, v) in names.iter().zip(vars) {
                cx.bind(n, *v);
            }
            f(&cx, &vars[names.len()..])
        },
        H,
        COORDS,
        seed,
    )
}

pub fn suite() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    out.push(("kd", gradcheck::check(&[rnd(&[6, 5], 1), rnd(&[6, 5], 2)], |g, v| kd_loss(g, v[0], v[1], 0.9, 0.1).unwrap(), H, COORDS, 3)));

    let rgb_cfg = RgbLossConfig { use_l2: true, use_ssim: true, ..RgbLossConfig::default() };
    let proxy = uniugg_core::encoder::PerceptualProxy::<f64>::new();
    let target = Tensor::uniform(vec![1, 7, 6, 3], 0.0, 1.0, &mut seeded(4));
    out.push((
        "rgb",
        gradcheck::check(
            &[Tensor::uniform(vec![1, 7, 6, 3], 0.0, 1.0, &mut seeded(5))],
            |g, v| rgb_loss(g, v[0], g.constant(target.clone()), &rgb_cfg, &proxy).unwrap(),
            H,
            COORDS * 2,
            6,
        ),
    ));

    let gt = rnd(&[2, 4, 4, 3], 7).map(|v| v + 2.0);
    let mask: Vec<bool> = (0..32).map(|i| i % 5 != 1).collect();
    out.push((
        "conf",
        gradcheck::check(
            &[rnd(&[2, 4, 4, 3], 8).map(|v| v + 2.0), rnd(&[2, 4, 4], 9)],
            |g, v| {
                let c = g.add_scalar(g.exp(v[1]), 1.0);
                conf_loss(g, v[0], c, &gt, &mask, 0.2).unwrap()
            },
            H,
            COORDS,
            10,
        ),
    ));

    let pairs = vec![vec![(0, 2), (3, 3), (5, 1)], vec![(1, 4)]];
    out.push((
        "match",
        gradcheck::check(&[rnd(&[2, 6, 3], 11), rnd(&[2, 6, 3], 12)], |g, v| match_loss(g, v[0], v[1], &pairs, 0.3).unwrap(), H, COORDS, 13),
    ));

    out.push(("kl", gradcheck::check(&[rnd(&[1, 3, 3, 4], 14), rnd(&[1, 3, 3, 4], 15)], |g, v| kl_loss(g, v[0], v[1]).unwrap(), H, COORDS, 16)));

    let (model, store, scene_pairs) = small_setup(20);
    let sched = make_schedule(10, 1e-3, 0.2).unwrap();
    let [lh, lw, c] = model.latent_shape();
    let x0 = rnd(&[2, lh, lw, c], 21);
    let eps = rnd(&[2, lh, lw, c], 22);
    let names = pick(&store, &["denoiser.input", "denoiser.blocks.0", "denoiser.out"]);
    out.push((
        "gen",
        check_params(&store, &names, &[rnd(&[2, model.conditioner.num_queries(), 8], 23)], 24, |cx, v| {
            gen_loss(cx, &model.denoiser, &x0, v[0], &[3, 9], &eps, &sched).unwrap()
        }),
    ));

    let names = pick(&store, &["cond.vision_proj", "cond.blocks.0", "cond.lm_head"]);
    let vocab = Vocab::standard();
    let q = vocab.encode("how many objects are visible ?").unwrap();
    let a = [vocab.id("two").unwrap(), Vocab::END];
    out.push((
        "vqa",
        check_params(&store, &names, &[rnd(&[1, model.conditioner.num_queries(), 8], 25)], 26, |cx, v| {
            vqa_loss(cx, &model.conditioner, v[0], &q, &a).unwrap()
        }),
    ));

    let w = LossWeights::default();
    let refs: Vec<&ScenePair> = scene_pairs.iter().collect();
    let batch = SpatialBatch::<f64>::new(&refs, &model.cfg.encoder).unwrap();
    let names = pick(&store, &["encoder.blocks.0", "spatial_decoder.head_i", "spatial_decoder.head_j", "rgb_head"]);
    out.push((
        "spatial_total",
        check_params(&store, &names, &[], 27, |cx, _| {
            spatial_objective(cx, &model.encoder, &model.rgb_head, &model.decoder, &batch, &w.spatial(), &w.rgb(), &model.proxy).unwrap().parts.total
        }),
    ));
    let names = pick(&store, &["vae.enc.conv_in", "vae.enc.mu", "vae.enc.logvar", "vae.dec.conv_out"]);
    out.push((
        "vae_total",
        check_params(&store, &names, &[], 28, |cx, _| {
            vae_objective(cx, &model.encoder, &model.rgb_head, &model.decoder, &model.vae, &batch, &w.spatial(), &w.rgb(), &model.proxy, &w.vae(), 29)
                .unwrap()
                .parts
                .total
        }),
    ));
    out
}

pub struct Additivity {
    pub spatial_err: f64,
    pub vae_err: f64,
    /// Defaults of the stage weights and of the VAE loss itself.
    pub gamma: (f64, f64),
}

/// Re-adds the objective terms from values computed in separate graphs.
pub fn additivity() -> Additivity {
    let (model, store, pairs) = small_setup(40);
    let refs: Vec<&ScenePair> = pairs.iter().collect();
    let batch = SpatialBatch::<f64>::new(&refs, &model.cfg.encoder).unwrap();
    let mut w = LossWeights { lambda1: 0.7, lambda2: 1.3, use_l2: true, use_ssim: true, ..LossWeights::default() };
    let mut spatial_err: f64 = 0.0;
    let mut vae_err: f64 = 0.0;
    for round in 0..2 {
        if round == 1 {
            w = LossWeights::default();
        }
        let (s, r) = (w.spatial(), w.rgb());
        let g = Graph::new();
        let cx = Ctx::frozen(&g, &store);
        let f = spatial_objective(&cx, &model.encoder, &model.rgb_head, &model.decoder, &batch, &s, &r, &model.proxy).unwrap();
        let val = |v: Var| g.value(v).clone();
        // each term again, from constants in a fresh graph
        let conf = |p: Var, c: Var, gt: &Tensor<f64>, m: &[bool]| {
            let h = Graph::new();
            let l = conf_loss(&h, h.constant(val(p)), h.constant(val(c)), gt, m, s.alpha_conf).unwrap();
            h.item(l)
        };
        let ci = conf(f.pred_i.points, f.pred_i.conf, &batch.gt_ii, &batch.mask_i);
        let cj = conf(f.pred_j.points, f.pred_j.conf, &batch.gt_ji, &batch.mask_j);
        let m = {
            let h = Graph::new();
            let l = match_loss(&h, h.constant(val(f.pred_i.desc)), h.constant(val(f.pred_j.desc)), &batch.cells, s.tau).unwrap();
            h.item(l)
        };
        let rgb = {
            let h = Graph::new();
            let z = h.constant(val(g.concat(&[f.z_i, f.z_j], 0)));
            let hc = Ctx::frozen(&h, &store);
            let recon = model.rgb_head.forward(&hc, z).unwrap();
            let l = rgb_loss(&h, recon, h.constant(batch.both_images().unwrap()), &r, &model.proxy).unwrap();
            h.item(l)
        };
        let want = ci + cj + w.lambda1 * m + w.lambda2 * rgb;
        spatial_err = spatial_err.max((g.item(f.parts.total) - want).abs());

        let g = Graph::new();
        let cx = Ctx::frozen(&g, &store);
        let vf = vae_objective(&cx, &model.encoder, &model.rgb_head, &model.decoder, &model.vae, &batch, &s, &r, &model.proxy, &w.vae(), 41).unwrap();
        let (z, recon, mu, lv) = (g.value(vf.z).clone(), g.value(vf.recon).clone(), g.value(vf.mu).clone(), g.value(vf.log_var).clone());
        let mse = z.data().iter().zip(recon.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.numel() as f64;
        let half = mu.numel() / 2;
        let kl: f64 = (0..2)
            .map(|v| {
                let r = v * half..(v + 1) * half;
                0.5 * mu.data()[r.clone()].iter().zip(&lv.data()[r]).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum::<f64>() / half as f64
            })
            .sum();
        let want = g.item(vf.parts.spatial.total) + mse + w.gamma * kl;
        vae_err = vae_err.max((g.item(vf.parts.total) - want).abs());
        let sp = &vf.parts.spatial;
        let parts_sum = g.item(sp.conf_i) + g.item(sp.conf_j) + w.lambda1 * g.item(sp.matching) + w.lambda2 * g.item(sp.rgb);
        vae_err = vae_err.max((g.item(sp.total) - parts_sum).abs());
    }
    Additivity { spatial_err, vae_err, gamma: (LossWeights::default().gamma, VaeLossConfig::default().gamma) }
}
