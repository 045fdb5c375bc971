//! Projector, dual cross-attention decoder, spatial head and the spatial losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{rgb_loss, Encoder, EncoderConfig, PerceptualProxy, RgbHead, RgbLossConfig, TokenGrid};
use crate::error::{invalid, Result};
use crate::geometry::ScenePair;
use crate::nn::{Block, Ctx, LayerNorm, Linear, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIX: &str = "spatial_decoder";

/// Raw confidence logits are clamped to this magnitude before `1 + exp`.
pub const CONF_LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub descriptor_dim: usize,
    pub mlp_ratio: usize,
    /// One set of weights for both branches (makes the decoder swap-symmetric).
    pub shared_branches: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 128, depth: 2, heads: 4, descriptor_dim: 16, mlp_ratio: 4, shared_branches: false }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return invalid("decoder depth must be at least 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.descriptor_dim == 0 {
            return invalid("descriptor_dim must be positive");
        }
        Ok(())
    }
}

/// Per-view outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialPrediction<T> {
    /// `[H, W, 3]` in the camera-i frame.
    pub pointmap: Tensor<T>,
    /// `[H, W]`, every value ≥ 1.
    pub confidence: Tensor<T>,
    /// `[H_t, W_t, d_f]`, unit rows.
    pub descriptors: Tensor<T>,
}

/// Graph handles of a batched prediction for one branch.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[B, H, W, 3]`.
    pub points: Var,
    /// `[B, H, W]`.
    pub conf: Var,
    /// `[B, N, d_f]`.
    pub desc: Var,
}

#[derive(Clone, Debug)]
struct Head {
    norm: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct SpatialDecoder {
    pub enc: EncoderConfig,
    pub cfg: DecoderConfig,
    proj: Mlp,
    branches: [Vec<Block>; 2],
    heads: [Head; 2],
}

impl SpatialDecoder {
    pub fn new(enc: &EncoderConfig, cfg: &DecoderConfig) -> Result<Self> {
        enc.validate()?;
        cfg.validate()?;
        let branch = |tag: &str| -> Vec<Block> {
            (0..cfg.depth).map(|l| Block::new(&format!("{PREFIX}.{tag}.{l}"), cfg.dim, cfg.heads, cfg.mlp_ratio, true)).collect()
        };
        let head = |tag: &str| Head {
            norm: LayerNorm::new(format!("{PREFIX}.{tag}.norm"), cfg.dim),
            out: Linear::new(format!("{PREFIX}.{tag}.out"), cfg.dim, 4 * enc.patch_size * enc.patch_size + cfg.descriptor_dim),
        };
        let (b, h) = if cfg.shared_branches {
            ([branch("dec"), branch("dec")], [head("head"), head("head")])
        } else {
            ([branch("dec_i"), branch("dec_j")], [head("head_i"), head("head_j")])
        };
        Ok(Self { enc: enc.clone(), cfg: cfg.clone(), proj: Mlp::new(&format!("{PREFIX}.proj"), enc.dim, cfg.dim, cfg.dim), branches: b, heads: h })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.proj.init(store, rng);
        let n = if self.cfg.shared_branches { 1 } else { 2 };
        let p2 = self.enc.patch_size * self.enc.patch_size;
        for k in 0..n {
            for b in &self.branches[k] {
                b.init(store, rng);
            }
            let h = &self.heads[k];
            h.norm.init(store);
            h.out.init(store, rng);
            // start every pixel one unit in front of the camera
            let bias = store.get_mut(&h.out.bias()).expect("head bias");
            for px in 0..p2 {
                bias.data_mut()[px * 3 + 2] = T::one();
            }
        }
    }

    /// Visual projector: `[B, N, d_enc]` → `[B, N, d_dec]`.
    pub fn project<T: Scalar>(&self, cx: &Ctx<T>, z: Var) -> Var {
        self.proj.forward(cx, z)
    }

    /// Runs both branches, each cross-attending to the other's previous layer.
    pub fn decode_pair<T: Scalar>(&self, cx: &Ctx<T>, zi: Var, zj: Var) -> Result<(Var, Var)> {
        let (si, sj) = (cx.g.shape(zi), cx.g.shape(zj));
        if si != sj {
            return invalid(format!("decode_pair geometry mismatch {si:?} vs {sj:?}"));
        }
        let (mut hi, mut hj) = (zi, zj);
        for (bi, bj) in self.branches[0].iter().zip(&self.branches[1]) {
            let ni = bi.forward(cx, hi, Some(hj), None);
            let nj = bj.forward(cx, hj, Some(hi), None);
            (hi, hj) = (ni, nj);
        }
        Ok((hi, hj))
    }

    /// Per-token prediction of `p × p` pixel blocks plus a cell descriptor.
    pub fn head<T: Scalar>(&self, cx: &Ctx<T>, h: Var, branch: usize) -> PredictionVars {
        let g = cx.g;
        let hd = &self.heads[branch];
        let b = g.shape(h)[0];
        let (ht, wt) = self.enc.grid();
        let p = self.enc.patch_size;
        let p2 = p * p;
        let out = hd.out.forward(cx, hd.norm.forward(cx, h));
        let pts = g.narrow(out, 2, 0, 3 * p2);
        let pts = g.reshape(pts, vec![b, ht, wt, p, p, 3]);
        let pts = g.permute(pts, &[0, 1, 3, 2, 4, 5]);
        let points = g.reshape(pts, vec![b, ht * p, wt * p, 3]);
        let raw = g.narrow(out, 2, 3 * p2, p2);
        let raw = g.reshape(raw, vec![b, ht, wt, p, p]);
        let raw = g.permute(raw, &[0, 1, 3, 2, 4]);
        let raw = g.reshape(raw, vec![b, ht * p, wt * p]);
        let raw = g.clamp(raw, T::lit(-CONF_LOGIT_LIMIT), T::lit(CONF_LOGIT_LIMIT));
        let conf = g.add_scalar(g.exp(raw), T::one());
        let desc = g.narrow(out, 2, 4 * p2, self.cfg.descriptor_dim);
        let desc = g.l2_normalize(desc, 1e-12);
        PredictionVars { points, conf, desc }
    }

    /// Token grids `[B, N, d_enc]` of both views → per-view predictions.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, zi: Var, zj: Var) -> Result<(PredictionVars, PredictionVars)> {
        cx.require_prefix(PREFIX)?;
        let (pi, pj) = (self.project(cx, zi), self.project(cx, zj));
        let (hi, hj) = self.decode_pair(cx, pi, pj)?;
        Ok((self.head(cx, hi, 0), self.head(cx, hj, 1)))
    }

    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        zi: &TokenGrid<T>,
        zj: &TokenGrid<T>,
    ) -> Result<(SpatialPrediction<T>, SpatialPrediction<T>)> {
        if zi.tokens.shape() != zj.tokens.shape() {
            return invalid("token grids of the two views differ in shape");
        }
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let flat = |z: &TokenGrid<T>| g.constant(z.flat().reshape(vec![1, z.grid().0 * z.grid().1, z.dim()]));
        let (a, b) = self.forward(&cx, flat(zi), flat(zj))?;
        let (h, w) = (self.enc.image_height, self.enc.image_width);
        let (ht, wt) = self.enc.grid();
        let take = |v: &PredictionVars| SpatialPrediction {
            pointmap: g.value(v.points).clone().reshape(vec![h, w, 3]),
            confidence: g.value(v.conf).clone().reshape(vec![h, w]),
            descriptors: g.value(v.desc).clone().reshape(vec![ht, wt, self.cfg.descriptor_dim]),
        };
        Ok((take(&a), take(&b)))
    }
}

fn per_item_weights<T: Scalar>(mask: &[bool], batch: usize) -> Result<Vec<T>> {
    let n = mask.len() / batch.max(1);
    let mut w = Vec::with_capacity(mask.len());
    for (b, m) in mask.chunks(n.max(1)).enumerate() {
        let count = m.iter().filter(|&&v| v).count();
        if count == 0 {
            return invalid(format!("empty valid mask for batch item {b}"));
        }
        let inv = T::lit(1.0 / count as f64);
        w.extend(m.iter().map(|&v| if v { inv } else { T::zero() }));
    }
    Ok(w)
}

/// Each item's points divided by its mean point norm over the valid mask.
pub fn normalize_by_mean_norm<T: Scalar>(points: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let b = points.shape()[0];
    let w = per_item_weights::<T>(mask, b)?;
    let per = points.numel() / b;
    let mut out = points.clone();
    for (item, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let ws = &w[item * per / 3..(item + 1) * per / 3];
        let s: T = chunk.chunks(3).zip(ws).map(|(p, &wi)| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() * wi).sum();
        if !(s > T::zero()) {
            return invalid(format!("ground-truth points of item {item} have zero mean norm"));
        }
        chunk.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Confidence-weighted, scale-normalized pointmap regression for one view:
/// per item, the mean over valid pixels of `C·ρ − α·log C` with
/// `ρ = ‖X/s_pred − X̂/s_gt‖`; averaged over the batch.
pub fn conf_loss<T: Scalar>(
    g: &Graph<T>,
    points: Var,
    conf: Var,
    gt: &Tensor<T>,
    mask: &[bool],
    alpha_conf: f64,
) -> Result<Var> {
    let ps = g.shape(points);
    if ps != gt.shape() || ps.len() != 4 || ps[3] != 3 {
        return invalid(format!("conf_loss shapes: prediction {ps:?}, ground truth {:?}", gt.shape()));
    }
    let (b, h, w) = (ps[0], ps[1], ps[2]);
    if mask.len() != b * h * w || g.shape(conf) != [b, h, w] {
        return invalid("conf_loss mask/confidence size mismatch");
    }
    let weights = g.constant(Tensor::from_vec(vec![b, h, w], per_item_weights(mask, b)?));
    let gt_n = g.constant(normalize_by_mean_norm(gt, mask)?);
    let norms = g.norm_last(points);
    let s_pred = g.sum_last(g.reshape(g.mul(norms, weights), vec![b, h * w]));
    let inv = g.reshape(g.recip(s_pred), vec![b, 1, 1, 1]);
    let pn = g.mul_bcast(points, inv);
    let rho = g.norm_last(g.sub(pn, gt_n));
    let per_px = g.sub(g.mul(conf, rho), g.scale(g.ln(conf), T::lit(alpha_conf)));
    let total = g.sum(g.mul(per_px, weights));
    Ok(g.scale(total, T::lit(1.0 / b as f64)))
}

/// Token-cell pairs `(cell_i, cell_j)` hit by pixel correspondences, with
/// exact duplicates removed.
pub fn correspondence_cells(corr: &[[f64; 4]], patch_size: usize, grid: (usize, usize)) -> Vec<(usize, usize)> {
    let (gh, gw) = grid;
    let cell = |u: f64, v: f64| {
        let c = ((u / patch_size as f64).floor() as usize).min(gw - 1);
        let r = ((v / patch_size as f64).floor() as usize).min(gh - 1);
        r * gw + c
    };
    let mut out: Vec<(usize, usize)> = corr.iter().map(|c| (cell(c[0], c[1]), cell(c[2], c[3]))).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Symmetric InfoNCE over token-cell descriptors.
///
/// For each correspondence `(a, b)` the cross-entropy of `a → b` under a
/// softmax over all cells of view j at temperature `τ`, and of `b → a` over
/// the cells of view i. The two directions are averaged, then items.
pub fn match_loss<T: Scalar>(g: &Graph<T>, desc_i: Var, desc_j: Var, pairs: &[Vec<(usize, usize)>], tau: f64) -> Result<Var> {
    let s = g.shape(desc_i);
    if s != g.shape(desc_j) || s.len() != 3 || pairs.len() != s[0] {
        return invalid(format!("match_loss expects one correspondence list per [B, N, d] item, got {} for {s:?}", pairs.len()));
    }
    if !(tau > 0.0) {
        return invalid("temperature must be positive");
    }
    let (n, d) = (s[1], s[2]);
    let mut items = Vec::with_capacity(s[0]);
    for (b, pr) in pairs.iter().enumerate() {
        if pr.is_empty() {
            return invalid(format!("no correspondences for item {b}"));
        }
        if pr.iter().any(|&(a, c)| a >= n || c >= n) {
            return invalid("correspondence cell out of range");
        }
        let di = g.reshape(g.narrow(desc_i, 0, b, 1), vec![1, n, d]);
        let dj = g.reshape(g.narrow(desc_j, 0, b, 1), vec![1, n, d]);
        let (src_i, dst_j): (Vec<usize>, Vec<usize>) = pr.iter().copied().unzip();
        let direction = |x: Var, y: Var, rows: &[usize], cols: &[usize]| {
            let sim = g.reshape(g.bmm(x, y, true), vec![n, n]);
            let logp = g.log_softmax(g.scale(sim, T::lit(1.0 / tau)));
            let sel = g.index_select(logp, 0, rows);
            g.mean(g.pick(sel, cols))
        };
        let ij = direction(di, dj, &src_i, &dst_j);
        let ji = direction(dj, di, &dst_j, &src_i);
        items.push(g.scale(g.add(ij, ji), T::lit(-0.5)));
    }
    let mut total = items[0];
    for &it in &items[1..] {
        total = g.add(total, it);
    }
    Ok(g.scale(total, T::lit(1.0 / items.len() as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpatialLossConfig {
    pub alpha_conf: f64,
    pub tau: f64,
    pub lambda_match: f64,
    pub lambda_rgb: f64,
}

impl Default for SpatialLossConfig {
    fn default() -> Self {
        Self { alpha_conf: 0.2, tau: 0.07, lambda_match: 1.0, lambda_rgb: 1.0 }
    }
}

/// Terms of `L_s = L_conf + λ1·L_match + λ2·L_rgb`.
#[derive(Clone, Copy, Debug)]
pub struct SpatialLossParts {
    pub conf_i: Var,
    pub conf_j: Var,
    pub matching: Var,
    pub rgb: Var,
    pub total: Var,
}

pub fn assemble_spatial_loss<T: Scalar>(g: &Graph<T>, conf_i: Var, conf_j: Var, matching: Var, rgb: Var, cfg: &SpatialLossConfig) -> SpatialLossParts {
    let conf = g.add(conf_i, conf_j);
    let m = g.scale(matching, T::lit(cfg.lambda_match));
    let r = g.scale(rgb, T::lit(cfg.lambda_rgb));
    let total = g.add(g.add(conf, m), r);
    SpatialLossParts { conf_i, conf_j, matching, rgb, total }
}

/// Scene pairs stacked for one training step.
#[derive(Clone, Debug)]
pub struct SpatialBatch<T> {
    pub images_i: Tensor<T>,
    pub images_j: Tensor<T>,
    pub gt_ii: Tensor<T>,
    pub gt_ji: Tensor<T>,
    pub mask_i: Vec<bool>,
    pub mask_j: Vec<bool>,
    pub cells: Vec<Vec<(usize, usize)>>,
}

impl<T: Scalar> SpatialBatch<T> {
    pub fn new(pairs: &[&ScenePair], enc: &EncoderConfig) -> Result<Self> {
        if pairs.is_empty() {
            return invalid("empty batch");
        }
        for p in pairs {
            if p.width() != enc.image_width || p.height() != enc.image_height {
                return invalid(format!(
                    "pair {}x{} does not match encoder input {}x{}",
                    p.width(),
                    p.height(),
                    enc.image_width,
                    enc.image_height
                ));
            }
        }
        let (h, w) = (enc.image_height, enc.image_width);
        let stack = |f: &dyn Fn(&ScenePair) -> &Vec<f64>| {
            let items: Vec<Tensor<T>> = pairs.iter().map(|p| Tensor::from_f64(vec![h, w, 3], f(p))).collect();
            Tensor::stack(&items)
        };
        Ok(Self {
            images_i: stack(&|p| &p.image_i.data)?,
            images_j: stack(&|p| &p.image_j.data)?,
            gt_ii: stack(&|p| &p.gt_pointmap_ii)?,
            gt_ji: stack(&|p| &p.gt_pointmap_ji)?,
            mask_i: pairs.iter().flat_map(|p| p.valid_mask_i.iter().copied()).collect(),
            mask_j: pairs.iter().flat_map(|p| p.valid_mask_j.iter().copied()).collect(),
            cells: pairs.iter().map(|p| correspondence_cells(&p.correspondences, enc.patch_size, enc.grid())).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images_i.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder, RGB head and spatial decoder wired together for `L_s`.
pub struct SpatialForward {
    pub parts: SpatialLossParts,
    pub z_i: Var,
    pub z_j: Var,
    pub pred_i: PredictionVars,
    pub pred_j: PredictionVars,
}

impl<T: Scalar> SpatialBatch<T> {
    /// Views i then j stacked into one `[2B, H, W, 3]` tensor.
    pub fn both_images(&self) -> Result<Tensor<T>> {
        let mut items: Vec<Tensor<T>> = Vec::with_capacity(2 * self.len());
        let per = self.images_i.numel() / self.len();
        let s = self.images_i.shape();
        for src in [&self.images_i, &self.images_j] {
            for c in src.data().chunks(per) {
                items.push(Tensor::from_vec(vec![s[1], s[2], 3], c.to_vec()));
            }
        }
        Tensor::stack(&items)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn spatial_objective<T: Scalar>(
    cx: &Ctx<T>,
    encoder: &Encoder,
    rgb_head: &RgbHead,
    decoder: &SpatialDecoder,
    batch: &SpatialBatch<T>,
    cfg: &SpatialLossConfig,
    rgb_cfg: &RgbLossConfig,
    proxy: &PerceptualProxy<T>,
) -> Result<SpatialForward> {
    let both = batch.both_images()?;
    let z = encoder.forward(cx, &both)?;
    spatial_objective_from_tokens(cx, rgb_head, decoder, batch, z, &both, cfg, rgb_cfg, proxy)
}

/// `L_s` for given token grids `z` (`[2B, N, d]`, views i then j), e.g.
/// tokens reconstructed by the Spatial-VAE.
#[allow(clippy::too_many_arguments)]
pub fn spatial_objective_from_tokens<T: Scalar>(
    cx: &Ctx<T>,
    rgb_head: &RgbHead,
    decoder: &SpatialDecoder,
    batch: &SpatialBatch<T>,
    z: Var,
    both_images: &Tensor<T>,
    cfg: &SpatialLossConfig,
    rgb_cfg: &RgbLossConfig,
    proxy: &PerceptualProxy<T>,
) -> Result<SpatialForward> {
    let g = cx.g;
    let b = batch.len();
    if g.shape(z)[0] != 2 * b {
        return invalid(format!("expected {} token grids, got {}", 2 * b, g.shape(z)[0]));
    }
    let z_i = g.narrow(z, 0, 0, b);
    let z_j = g.narrow(z, 0, b, b);
    let (pred_i, pred_j) = decoder.forward(cx, z_i, z_j)?;
    let conf_i = conf_loss(g, pred_i.points, pred_i.conf, &batch.gt_ii, &batch.mask_i, cfg.alpha_conf)?;
    let conf_j = conf_loss(g, pred_j.points, pred_j.conf, &batch.gt_ji, &batch.mask_j, cfg.alpha_conf)?;
    let matching = match_loss(g, pred_i.desc, pred_j.desc, &batch.cells, cfg.tau)?;
    let recon = rgb_head.forward(cx, z)?;
    let target = g.constant(both_images.clone());
    let rgb = rgb_loss(g, recon, target, rgb_cfg, proxy)?;
    let parts = assemble_spatial_loss(g, conf_i, conf_j, matching, rgb, cfg);
    Ok(SpatialForward { parts, z_i, z_j, pred_i, pred_j })
}
