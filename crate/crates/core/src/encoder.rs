//! Patch tokenizer, transformer encoder, RGB head and the reconstruction loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Block, Ctx, LayerNorm, Linear, ParamStore};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIX: &str = "encoder";
pub const RGB_PREFIX: &str = "rgb_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_height: 64, image_width: 64, patch_size: 8, dim: 128, depth: 4, heads: 4, mlp_ratio: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return invalid(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.depth == 0 {
            return invalid("encoder depth must be at least 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// The encoder output Z for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    /// `[H_t, W_t, d]`.
    pub tokens: Tensor<T>,
    pub patch_size: usize,
    pub source_size: (usize, usize),
}

impl<T: Scalar> TokenGrid<T> {
    pub fn grid(&self) -> (usize, usize) {
        (self.tokens.shape()[0], self.tokens.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Tokens flattened to `[N, d]`.
    pub fn flat(&self) -> Tensor<T> {
        let (h, w) = self.grid();
        self.tokens.clone().reshape(vec![h * w, self.dim()])
    }
}

/// `[H, W, 3]` (or `[B, H, W, 3]`) → `[H_t, W_t, 3p²]` (or batched), each
/// patch vector ordered `(py, px, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    let (batch, h, w, c) = match s.len() {
        3 => (None, s[0], s[1], s[2]),
        4 => (Some(s[0]), s[1], s[2], s[3]),
        _ => return invalid(format!("patchify expects [H,W,C] or [B,H,W,C], got {s:?}")),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return invalid(format!("image {h}x{w} not divisible by patch size {patch_size}"));
    }
    let (ht, wt, p) = (h / patch_size, w / patch_size, patch_size);
    let b = batch.unwrap_or(1);
    let x = image.clone().reshape(vec![b, ht, p, wt, p, c]).permute(&[0, 1, 3, 2, 4, 5]);
    Ok(match batch {
        None => x.reshape(vec![ht, wt, p * p * c]),
        Some(b) => x.reshape(vec![b, ht, wt, p * p * c]),
    })
}

/// Inverse of [`patchify`] for 3-channel patches.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    let p = patch_size;
    let (batch, ht, wt, pd) = match s.len() {
        3 => (None, s[0], s[1], s[2]),
        4 => (Some(s[0]), s[1], s[2], s[3]),
        _ => return invalid(format!("unpatchify expects a patch grid, got {s:?}")),
    };
    if p == 0 || pd % (p * p) != 0 {
        return invalid(format!("patch vector length {pd} incompatible with patch size {p}"));
    }
    let c = pd / (p * p);
    let b = batch.unwrap_or(1);
    let x = patches.clone().reshape(vec![b, ht, wt, p, p, c]).permute(&[0, 1, 3, 2, 4, 5]);
    Ok(match batch {
        None => x.reshape(vec![ht * p, wt * p, c]),
        Some(b) => x.reshape(vec![b, ht * p, wt * p, c]),
    })
}

/// Graph version of [`unpatchify`]: `[B, N, 3p²]` → `[B, H, W, 3]`.
pub fn unpatchify_var<T: Scalar>(g: &Graph<T>, x: Var, grid: (usize, usize), patch_size: usize) -> Var {
    let b = g.shape(x)[0];
    let (ht, wt) = grid;
    let p = patch_size;
    let x = g.reshape(x, vec![b, ht, wt, p, p, 3]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, vec![b, ht * p, wt * p, 3])
}

/// Pre-norm ViT: linear patch embedding, learned positions, blocks, final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        Self::with_prefix(cfg, PREFIX)
    }

    /// Same architecture under another parameter namespace (e.g. a teacher).
    pub fn with_prefix(cfg: &EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            embed: Linear::new(format!("{prefix}.embed"), cfg.patch_dim(), cfg.dim),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&format!("{prefix}.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, false))
                .collect(),
            norm: LayerNorm::new(format!("{prefix}.norm"), cfg.dim),
        })
    }

    pub fn pos_name(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.embed.init(store, rng);
        store.insert(self.pos_name(), Tensor::randn(vec![self.cfg.num_tokens(), self.cfg.dim], 0.02, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
    }

    /// Images `[B, H, W, 3]` → tokens `[B, N, d]`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, images: &Tensor<T>) -> Result<Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.cfg.image_height || s[2] != self.cfg.image_width || s[3] != 3 {
            return invalid(format!(
                "encoder expects [B, {}, {}, 3], got {s:?}",
                self.cfg.image_height, self.cfg.image_width
            ));
        }
        cx.require_prefix(&self.prefix)?;
        let patches = patchify(images, self.cfg.patch_size)?.reshape(vec![s[0], self.cfg.num_tokens(), self.cfg.patch_dim()]);
        let g = cx.g;
        let x = g.constant(patches);
        let x = self.embed.forward(cx, x);
        let mut x = g.add_bcast(x, cx.p(&self.pos_name()));
        for b in &self.blocks {
            x = b.forward(cx, x, None, None);
        }
        Ok(self.norm.forward(cx, x))
    }

    /// Inference on one `[H, W, 3]` image.
    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<TokenGrid<T>> {
        params.filter_prefix(&self.prefix).check_finite()?;
        let batch = image.clone().reshape({
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            s
        });
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let z = self.forward(&cx, &batch)?;
        let z = g.value(z).clone();
        if !z.all_finite() {
            return Err(Error::Numeric("encoder produced non-finite tokens".into()));
        }
        let (ht, wt) = self.cfg.grid();
        Ok(TokenGrid {
            tokens: z.reshape(vec![ht, wt, self.cfg.dim]),
            patch_size: self.cfg.patch_size,
            source_size: (self.cfg.image_height, self.cfg.image_width),
        })
    }
}

/// Per-token linear map to a pixel patch followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct RgbHead {
    pub cfg: EncoderConfig,
    proj: Linear,
}

impl RgbHead {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), proj: Linear::new(format!("{RGB_PREFIX}.proj"), cfg.dim, cfg.patch_dim()) })
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.proj.init(store, rng);
    }

    /// Tokens `[B, N, d]` → image `[B, H, W, 3]` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, z: Var) -> Result<Var> {
        cx.require_prefix(RGB_PREFIX)?;
        let s = cx.g.shape(z);
        if s.len() != 3 || s[1] != self.cfg.num_tokens() || s[2] != self.cfg.dim {
            return invalid(format!("rgb head expects [B, {}, {}], got {s:?}", self.cfg.num_tokens(), self.cfg.dim));
        }
        let x = self.proj.forward(cx, z);
        let x = cx.g.sigmoid(x);
        Ok(unpatchify_var(cx.g, x, self.cfg.grid(), self.cfg.patch_size))
    }

    pub fn reconstruct<T: Scalar>(&self, params: &ParamStore<T>, z: &TokenGrid<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let n = z.grid().0 * z.grid().1;
        let zv = g.constant(z.tokens.clone().reshape(vec![1, n, z.dim()]));
        let img = self.forward(&cx, zv)?;
        let out = g.value(img).clone();
        Ok(out.reshape(vec![self.cfg.image_height, self.cfg.image_width, 3]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RgbLossConfig {
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    /// Optional mean-squared term.
    pub use_l2: bool,
    pub lambda_l2: f64,
    /// Optional `1 - SSIM` term.
    pub use_ssim: bool,
    pub lambda_ssim: f64,
}

impl Default for RgbLossConfig {
    fn default() -> Self {
        Self { lambda_l1: 1.0, lambda_perc: 1.0, use_l2: false, lambda_l2: 0.5, use_ssim: false, lambda_ssim: 0.2 }
    }
}

/// Seed of the frozen perceptual feature pyramid.
pub const PROXY_SEED: u64 = 0x5eed_0f_1e55;
pub const PROXY_CHANNELS: [usize; 3] = [8, 16, 32];

/// Frozen strided-conv pyramid standing in for a learned perceptual metric.
///
/// Stage 0 is the image itself with a constant channel appended, so the
/// distance vanishes only for identical images. Stages 1–3 are 3×3 stride-2
/// convolutions with ReLU. At every stage features are unit-normalized over
/// channels and compared by squared distance, averaged over positions.
#[derive(Clone, Debug)]
pub struct PerceptualProxy<T> {
    /// `[cout, cin, 3, 3]` per stage.
    pub weights: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for PerceptualProxy<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PerceptualProxy<T> {
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        let mut rng = seeded(PROXY_SEED);
        let mut cin = 4;
        let mut weights = Vec::new();
        for &cout in &PROXY_CHANNELS {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            weights.push(Tensor::randn(vec![cout, cin, 3, 3], std, &mut rng));
            cin = cout;
        }
        Self { weights }
    }

    fn stage_distance(g: &Graph<T>, a: Var, b: Var) -> Var {
        let a = g.l2_normalize(a, Self::EPS);
        let b = g.l2_normalize(b, Self::EPS);
        let d = g.sub(a, b);
        let d = g.square(d);
        let d = g.sum_last(d);
        g.mean(d)
    }

    /// Distance between two `[B, H, W, 3]` images.
    pub fn distance(&self, g: &Graph<T>, a: Var, b: Var) -> Var {
        let s = g.shape(a);
        let ones = g.constant(Tensor::ones(vec![s[0], s[1], s[2], 1]));
        let mut fa = g.concat(&[a, ones], 3);
        let mut fb = g.concat(&[b, ones], 3);
        let mut total = Self::stage_distance(g, fa, fb);
        fa = g.permute(fa, &[0, 3, 1, 2]);
        fb = g.permute(fb, &[0, 3, 1, 2]);
        for w in &self.weights {
            let wv = g.constant(w.clone());
            fa = g.relu(g.conv2d(fa, wv, 2, 1));
            fb = g.relu(g.conv2d(fb, wv, 2, 1));
            let ha = g.permute(fa, &[0, 2, 3, 1]);
            let hb = g.permute(fb, &[0, 2, 3, 1]);
            let d = Self::stage_distance(g, ha, hb);
            total = g.add(total, d);
        }
        total
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over 3×3 box windows (valid positions only), per channel.
pub fn ssim<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Var {
    let s = g.shape(a);
    let (bsz, h, w) = (s[0], s[1], s[2]);
    let planes = |x: Var| {
        let x = g.permute(x, &[0, 3, 1, 2]);
        g.reshape(x, vec![bsz * 3, 1, h, w])
    };
    let (a, b) = (planes(a), planes(b));
    let boxf = g.constant(Tensor::full(vec![1, 1, 3, 3], T::lit(1.0 / 9.0)));
    let avg = |x: Var| g.conv2d(x, boxf, 1, 0);
    let (mu_a, mu_b) = (avg(a), avg(b));
    let mu_ab = g.mul(mu_a, mu_b);
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let var_a = g.sub(avg(g.square(a)), mu_a2);
    let var_b = g.sub(avg(g.square(b)), mu_b2);
    let cov = g.sub(avg(g.mul(a, b)), mu_ab);
    let num1 = g.add_scalar(g.scale(mu_ab, T::lit(2.0)), T::lit(SSIM_C1));
    let num2 = g.add_scalar(g.scale(cov, T::lit(2.0)), T::lit(SSIM_C2));
    let den1 = g.add_scalar(g.add(mu_a2, mu_b2), T::lit(SSIM_C1));
    let den2 = g.add_scalar(g.add(var_a, var_b), T::lit(SSIM_C2));
    let map = g.div(g.mul(num1, num2), g.mul(den1, den2));
    g.mean(map)
}

/// `λ_l1 · mean|Î − I| + λ_perc · proxy(Î, I)` plus the optional terms.
pub fn rgb_loss<T: Scalar>(
    g: &Graph<T>,
    pred: Var,
    target: Var,
    cfg: &RgbLossConfig,
    proxy: &PerceptualProxy<T>,
) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts {
        return invalid(format!("rgb_loss shape mismatch {ps:?} vs {ts:?}"));
    }
    if ps.len() != 4 || ps[3] != 3 {
        return invalid(format!("rgb_loss expects [B, H, W, 3], got {ps:?}"));
    }
    let diff = g.sub(pred, target);
    let l1 = g.mean(g.abs(diff));
    let mut loss = g.scale(l1, T::lit(cfg.lambda_l1));
    if cfg.lambda_perc != 0.0 {
        let p = proxy.distance(g, pred, target);
        loss = g.add(loss, g.scale(p, T::lit(cfg.lambda_perc)));
    }
    if cfg.use_l2 {
        let l2 = g.mean(g.square(diff));
        loss = g.add(loss, g.scale(l2, T::lit(cfg.lambda_l2)));
    }
    if cfg.use_ssim {
        if ps[1] < 3 || ps[2] < 3 {
            return invalid("SSIM term needs images of at least 3x3");
        }
        let s = ssim(g, pred, target);
        let one_minus = g.add_scalar(g.neg(s), T::one());
        loss = g.add(loss, g.scale(one_minus, T::lit(cfg.lambda_ssim)));
    }
    Ok(loss)
}
