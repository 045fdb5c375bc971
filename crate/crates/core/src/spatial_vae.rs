//! Spatial-VAE: TokenGrid ⇄ 4-channel latent grid at twice the token
//! resolution, plus the joint fine-tuning loss with the spatial decoder.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{Encoder, EncoderConfig, PerceptualProxy, RgbHead, RgbLossConfig, TokenGrid};
use crate::error::{invalid, Error, Result};
use crate::geometry::io::write_f32_le;
use crate::nn::{Block, Conv2d, ConvTranspose2d, Ctx, ParamStore};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::spatial_decoder::{self, spatial_objective_from_tokens, SpatialBatch, SpatialDecoder, SpatialLossConfig, SpatialLossParts};
use crate::tensor::Tensor;

pub const PREFIX: &str = "vae";
pub const LATENT_CHANNELS: usize = 4;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Channels after the initial convolution (256 at full scale).
    pub hidden: usize,
    /// Channels at latent resolution (128 at full scale).
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { hidden: 64, width: 32, blocks: 2, heads: 4, mlp_ratio: 2 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.width == 0 {
            return invalid("VAE channel counts must be positive");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return invalid(format!("VAE width {} not divisible by {} heads", self.width, self.heads));
        }
        Ok(())
    }
}

/// Mean and log-variance, each `[L_h, L_w, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SpatialVae {
    pub enc: EncoderConfig,
    pub cfg: VaeConfig,
    conv_in: Conv2d,
    up1: ConvTranspose2d,
    up2: Conv2d,
    enc_blocks: Vec<Block>,
    conv_mu: Conv2d,
    conv_logvar: Conv2d,
    pre: Conv2d,
    dec_blocks: Vec<Block>,
    down1: Conv2d,
    down2: Conv2d,
    conv_out: Conv2d,
}

impl SpatialVae {
    pub fn new(enc: &EncoderConfig, cfg: &VaeConfig) -> Result<Self> {
        enc.validate()?;
        cfg.validate()?;
        let (d, c1, c2) = (enc.dim, cfg.hidden, cfg.width);
        let n = |s: &str| format!("{PREFIX}.{s}");
        let blocks = |tag: &str| (0..cfg.blocks).map(|l| Block::new(&n(&format!("{tag}.{l}")), c2, cfg.heads, cfg.mlp_ratio, false)).collect();
        Ok(Self {
            enc: enc.clone(),
            cfg: cfg.clone(),
            conv_in: Conv2d::new(n("enc.conv_in"), d, c1, 3, 1, 1),
            up1: ConvTranspose2d::new(n("enc.up1"), c1, c2, 2, 2, 0),
            up2: Conv2d::new(n("enc.up2"), c2, c2, 3, 1, 1),
            enc_blocks: blocks("enc.blocks"),
            conv_mu: Conv2d::new(n("enc.mu"), c2, LATENT_CHANNELS, 3, 1, 1),
            conv_logvar: Conv2d::new(n("enc.logvar"), c2, LATENT_CHANNELS, 3, 1, 1),
            pre: Conv2d::new(n("dec.pre"), LATENT_CHANNELS, c2, 3, 1, 1),
            dec_blocks: blocks("dec.blocks"),
            down1: Conv2d::new(n("dec.down1"), c2, c2, 3, 1, 1),
            down2: Conv2d::new(n("dec.down2"), c2, c1, 3, 2, 1),
            conv_out: Conv2d::new(n("dec.conv_out"), c1, d, 3, 1, 1),
        })
    }

    /// `(L_h, L_w)`.
    pub fn latent_grid(&self) -> (usize, usize) {
        let (h, w) = self.enc.grid();
        (2 * h, 2 * w)
    }

    pub fn latent_numel(&self) -> usize {
        let (h, w) = self.latent_grid();
        h * w * LATENT_CHANNELS
    }

    /// The log-variance convolution starts at zero (unit posterior variance).
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in [&self.conv_in, &self.up2, &self.conv_mu, &self.pre, &self.down1, &self.down2, &self.conv_out] {
            c.init(store, rng);
        }
        self.up1.init(store, rng);
        self.conv_logvar.init_zero(store);
        for b in self.enc_blocks.iter().chain(&self.dec_blocks) {
            b.init(store, rng);
        }
    }

    fn blocks<T: Scalar>(&self, cx: &Ctx<T>, blocks: &[Block], x: Var) -> Var {
        // [B, C, H, W] → tokens → [B, C, H, W]
        let g = cx.g;
        let s = g.shape(x);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut t = g.reshape(g.permute(x, &[0, 2, 3, 1]), vec![b, h * w, c]);
        for blk in blocks {
            t = blk.forward(cx, t, None, None);
        }
        g.permute(g.reshape(t, vec![b, h, w, c]), &[0, 3, 1, 2])
    }

    /// Token grids `[B, N, d]` → `(μ, log σ²)`, each `[B, L_h, L_w, 4]`.
    pub fn encode<T: Scalar>(&self, cx: &Ctx<T>, z: Var) -> Result<(Var, Var)> {
        cx.require_prefix(PREFIX)?;
        let g = cx.g;
        let s = g.shape(z);
        let (ht, wt) = self.enc.grid();
        if s.len() != 3 || s[1] != ht * wt || s[2] != self.enc.dim {
            return invalid(format!("VAE expects [B, {}, {}] tokens, got {s:?}", ht * wt, self.enc.dim));
        }
        let b = s[0];
        let x = g.permute(g.reshape(z, vec![b, ht, wt, self.enc.dim]), &[0, 3, 1, 2]);
        let h = g.gelu(self.conv_in.forward(cx, x));
        let h = g.gelu(self.up1.forward(cx, h));
        let h = g.gelu(self.up2.forward(cx, h));
        let h = self.blocks(cx, &self.enc_blocks, h);
        let mu = g.permute(self.conv_mu.forward(cx, h), &[0, 2, 3, 1]);
        let lv = self.conv_logvar.forward(cx, h);
        let lv = g.permute(g.clamp(lv, T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX)), &[0, 2, 3, 1]);
        if !g.value(mu).all_finite() || !g.value(lv).all_finite() {
            return Err(Error::Numeric("non-finite VAE encoder activations".into()));
        }
        Ok((mu, lv))
    }

    /// Latents `[B, L_h, L_w, 4]` → token grids `[B, N, d]`.
    pub fn decode<T: Scalar>(&self, cx: &Ctx<T>, t: Var) -> Result<Var> {
        cx.require_prefix(PREFIX)?;
        let g = cx.g;
        let s = g.shape(t);
        let (lh, lw) = self.latent_grid();
        if s.len() != 4 || s[1..] != [lh, lw, LATENT_CHANNELS] {
            return invalid(format!("VAE decoder expects [B, {lh}, {lw}, {LATENT_CHANNELS}], got {s:?}"));
        }
        let b = s[0];
        let x = g.permute(t, &[0, 3, 1, 2]);
        let h = g.gelu(self.pre.forward(cx, x));
        let h = self.blocks(cx, &self.dec_blocks, h);
        let h = g.gelu(self.down1.forward(cx, h));
        let h = g.gelu(self.down2.forward(cx, h));
        let out = self.conv_out.forward(cx, h);
        let (ht, wt) = self.enc.grid();
        Ok(g.reshape(g.permute(out, &[0, 2, 3, 1]), vec![b, ht * wt, self.enc.dim]))
    }

    pub fn encode_grid<T: Scalar>(&self, params: &ParamStore<T>, z: &TokenGrid<T>) -> Result<LatentDistribution<T>> {
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let (ht, wt) = z.grid();
        let zv = g.constant(z.flat().reshape(vec![1, ht * wt, z.dim()]));
        let (mu, lv) = self.encode(&cx, zv)?;
        let (lh, lw) = self.latent_grid();
        let shape = vec![lh, lw, LATENT_CHANNELS];
        let mean = g.value(mu).clone().reshape(shape.clone());
        let log_var = g.value(lv).clone().reshape(shape);
        Ok(LatentDistribution { mean, log_var })
    }

    pub fn decode_latent<T: Scalar>(&self, params: &ParamStore<T>, latent: &Tensor<T>) -> Result<TokenGrid<T>> {
        let (lh, lw) = self.latent_grid();
        if latent.shape() != [lh, lw, LATENT_CHANNELS] {
            return invalid(format!("latent shape {:?}, expected [{lh}, {lw}, {LATENT_CHANNELS}]", latent.shape()));
        }
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let t = g.constant(latent.clone().reshape(vec![1, lh, lw, LATENT_CHANNELS]));
        let z = self.decode(&cx, t)?;
        let (ht, wt) = self.enc.grid();
        let tokens = g.value(z).clone().reshape(vec![ht, wt, self.enc.dim]);
        Ok(TokenGrid { tokens, patch_size: self.enc.patch_size, source_size: (self.enc.image_height, self.enc.image_width) })
    }
}

/// Standard normal draws for [`reparameterize`].
pub fn latent_noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, &mut seeded(seed))
}

/// `μ + exp(½ log σ²)·ε` with `ε` drawn from `noise_seed`; `μ` itself when
/// `deterministic`.
pub fn reparameterize<T: Scalar>(g: &Graph<T>, mu: Var, log_var: Var, noise_seed: u64, deterministic: bool) -> Var {
    if deterministic {
        return mu;
    }
    let eps = g.constant(latent_noise(&g.shape(mu), noise_seed));
    let std = g.exp(g.scale(log_var, T::lit(0.5)));
    g.add(mu, g.mul(std, eps))
}

/// `½·mean(μ² + σ² − 1 − log σ²)`, the KL divergence to `N(0, I)` averaged
/// over elements.
pub fn kl_loss<T: Scalar>(g: &Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(log_var) {
        return invalid("kl_loss: mean and log-variance shapes differ");
    }
    let terms = g.sub(g.add(g.square(mu), g.exp(log_var)), g.add_scalar(log_var, T::one()));
    Ok(g.scale(g.mean(terms), T::lit(0.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeLossConfig {
    pub gamma: f64,
    /// Reconstruction error over both views; `false` uses view i only.
    pub mse_both_views: bool,
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        Self { gamma: 1e-4, mse_both_views: true }
    }
}

/// Terms of `L_vae = L_s + L_mse + γ·L_kl`.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossParts {
    pub spatial: SpatialLossParts,
    pub mse: Var,
    pub kl: Var,
    pub total: Var,
}

pub fn assemble_vae_loss<T: Scalar>(g: &Graph<T>, spatial: SpatialLossParts, mse: Var, kl: Var, gamma: f64) -> VaeLossParts {
    let total = g.add(g.add(spatial.total, mse), g.scale(kl, T::lit(gamma)));
    VaeLossParts { spatial, mse, kl, total }
}

pub struct VaeForward {
    pub parts: VaeLossParts,
    /// Frozen encoder tokens `[2B, N, d]`, views i then j.
    pub z: Var,
    pub recon: Var,
    pub mu: Var,
    pub log_var: Var,
}

/// The VAE stage objective on one batch. Encoder tokens are detached, so
/// only the VAE and the attached spatial decoder receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn vae_objective<T: Scalar>(
    cx: &Ctx<T>,
    encoder: &Encoder,
    rgb_head: &RgbHead,
    decoder: &SpatialDecoder,
    vae: &SpatialVae,
    batch: &SpatialBatch<T>,
    spatial_cfg: &SpatialLossConfig,
    rgb_cfg: &RgbLossConfig,
    proxy: &PerceptualProxy<T>,
    loss_cfg: &VaeLossConfig,
    noise_seed: u64,
) -> Result<VaeForward> {
    if !cx.params().has_prefix(spatial_decoder::PREFIX) {
        return Err(Error::Config("VAE training needs an attached spatial decoder".into()));
    }
    let g = cx.g;
    let both = batch.both_images()?;
    let z = {
        let fg = Graph::new();
        let fcx = Ctx::frozen(&fg, cx.params());
        let zv = encoder.forward(&fcx, &both)?;
        let out = fg.value(zv).clone();
        g.constant(out)
    };
    let b = batch.len();
    let (mu, lv) = vae.encode(cx, z)?;
    let t = reparameterize(g, mu, lv, noise_seed, false);
    let recon = vae.decode(cx, t)?;
    let mse = if loss_cfg.mse_both_views {
        g.mean(g.square(g.sub(recon, z)))
    } else {
        g.mean(g.square(g.sub(g.narrow(recon, 0, 0, b), g.narrow(z, 0, 0, b))))
    };
    let kl_i = kl_loss(g, g.narrow(mu, 0, 0, b), g.narrow(lv, 0, 0, b))?;
    let kl_j = kl_loss(g, g.narrow(mu, 0, b, b), g.narrow(lv, 0, b, b))?;
    let kl = g.add(kl_i, kl_j);
    let sp = spatial_objective_from_tokens(cx, rgb_head, decoder, batch, recon, &both, spatial_cfg, rgb_cfg, proxy)?;
    let parts = assemble_vae_loss(g, sp.parts, mse, kl, loss_cfg.gamma);
    Ok(VaeForward { parts, z, recon, mu, log_var: lv })
}

/// Dumps a latent as little-endian float32, row-major `[L_h, L_w, 4]`.
pub fn write_latent<T: Scalar>(path: &Path, latent: &Tensor<T>) -> Result<()> {
    write_f32_le(path, latent.data().iter().map(|v| v.as_f64()))
}
