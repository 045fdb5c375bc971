//! Forward noising, ε-prediction loss and the reverse sampler over latent
//! grids.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{sinusoidal, Block, Ctx, LayerNorm, Linear, Mlp, ParamStore};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIX: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear β schedule. Index `t` runs over `1..=steps`; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(0.0 < beta_start && beta_start < 1.0 && beta_end < 1.0) || (steps > 1 && !(beta_start < beta_end)) {
        return invalid(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    if x0.shape() != eps.shape() {
        return invalid(format!("noise shape {:?} vs latent {:?}", eps.shape(), x0.shape()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// [`q_sample`] over a batch `[B, ...]` with one timestep per item.
pub fn q_sample_batch<T: Scalar>(x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return invalid(format!("noise shape {:?} vs latent {:?}", eps.shape(), x0.shape()));
    }
    let b = x0.shape()[0];
    if t.len() != b {
        return invalid(format!("{} timesteps for a batch of {b}", t.len()));
    }
    let per = x0.numel() / b.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, c) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let r = i * per..(i + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(&x, &e)| a * x + c * e));
    }
    Ok(Tensor::from_vec(x0.shape().to_vec(), out))
}

/// Conditional noise predictor `ε_θ(x_t | C, t)`.
pub trait NoisePredictor<T: Scalar> {
    /// `x`: `[B, L_h, L_w, c]`, `cond`: `[B, N_c, d_c]`; returns the shape of `x`.
    fn predict(&self, cx: &Ctx<T>, x: Var, t: &[usize], cond: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { dim: 128, depth: 2, heads: 4, mlp_ratio: 2 }
    }
}

/// Transformer over latent cells: per-cell input projection, learned
/// position embedding, a sinusoidal timestep embedding added before every
/// block, and cross-attention from cells to the conditioning features.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub grid: (usize, usize),
    pub channels: usize,
    pub cond_dim: usize,
    input: Linear,
    time: Mlp,
    cond: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, grid: (usize, usize), channels: usize, cond_dim: usize) -> Result<Self> {
        if cfg.depth == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 || cfg.dim < 2 {
            return invalid(format!("bad denoiser config {cfg:?}"));
        }
        let n = |s: &str| format!("{PREFIX}.{s}");
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            channels,
            cond_dim,
            input: Linear::new(n("input"), channels, cfg.dim),
            time: Mlp::new(&n("time"), cfg.dim, cfg.dim, cfg.dim),
            cond: Linear::new(n("cond"), cond_dim, cfg.dim),
            blocks: (0..cfg.depth).map(|l| Block::new(&n(&format!("blocks.{l}")), cfg.dim, cfg.heads, cfg.mlp_ratio, true)).collect(),
            norm: LayerNorm::new(n("norm"), cfg.dim),
            out: Linear::new(n("out"), cfg.dim, channels),
        })
    }

    fn pos_name(&self) -> String {
        format!("{PREFIX}.pos")
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.input.init(store, rng);
        store.insert(self.pos_name(), Tensor::randn(vec![self.grid.0 * self.grid.1, self.cfg.dim], 0.02, rng));
        self.time.init(store, rng);
        self.cond.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
        self.out.init(store, rng);
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser {
    fn predict(&self, cx: &Ctx<T>, x: Var, t: &[usize], cond: Var) -> Result<Var> {
        cx.require_prefix(PREFIX)?;
        let g = cx.g;
        let s = g.shape(x);
        let l = self.grid.0 * self.grid.1;
        if s.len() != 4 || s[1..] != [self.grid.0, self.grid.1, self.channels] {
            return invalid(format!("denoiser expects [B, {}, {}, {}], got {s:?}", self.grid.0, self.grid.1, self.channels));
        }
        let b = s[0];
        let cs = g.shape(cond);
        if cs.len() != 3 || cs[0] != b || cs[2] != self.cond_dim || t.len() != b {
            return invalid(format!("conditioning {cs:?} / {} timesteps for a batch of {b}", t.len()));
        }
        let h = self.input.forward(cx, g.reshape(x, vec![b, l, self.channels]));
        let mut h = g.add_bcast(h, cx.p(&self.pos_name()));
        let temb = self.time.forward(cx, g.constant(sinusoidal(t, self.cfg.dim)));
        let temb = g.reshape(temb, vec![b, 1, self.cfg.dim]);
        let ctx = self.cond.forward(cx, cond);
        for blk in &self.blocks {
            h = g.add_bcast(h, temb);
            h = blk.forward(cx, h, Some(ctx), None);
        }
        let out = self.out.forward(cx, self.norm.forward(cx, h));
        Ok(g.reshape(out, s))
    }
}

/// `mean((ε_θ(x_t | C, t) − ε)²)` with `x_t` from [`q_sample_batch`].
pub fn gen_loss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    cx: &Ctx<T>,
    predictor: &P,
    x0: &Tensor<T>,
    cond: Var,
    t: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let g = cx.g;
    let xt = g.constant(q_sample_batch(x0, t, eps, sched)?);
    let pred = predictor.predict(cx, xt, t, cond)?;
    Ok(g.mean(g.square(g.sub(pred, g.constant(eps.clone())))))
}

/// Uniform timesteps and standard normal noise for one training batch.
pub fn draw_training_noise<T: Scalar>(shape: &[usize], steps: usize, seed: u64) -> (Vec<usize>, Tensor<T>) {
    let mut rng = seeded(seed);
    let t = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
    let eps = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    (t, eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// DDPM posterior mean plus `√β̃_t` fresh noise.
    Ancestral,
    /// Posterior mean only.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

/// Reverse diffusion from `x_T ~ N(0, I)` drawn from `seed`.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    params: &ParamStore<T>,
    cond: &Tensor<T>,
    shape: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<Tensor<T>> {
    sample_traced(predictor, params, cond, shape, sched, seed, mode).map(|(x, _)| x)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_traced<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    params: &ParamStore<T>,
    cond: &Tensor<T>,
    shape: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    mode: SampleMode,
) -> Result<(Tensor<T>, Vec<TraceEntry>)> {
    let mut rng = seeded(seed);
    let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    reverse_from(predictor, params, cond, x, sched.steps(), sched, &mut rng, mode)
}

/// Runs the reverse chain from `x` at timestep `from` down to 0.
#[allow(clippy::too_many_arguments)]
pub fn reverse_from<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    params: &ParamStore<T>,
    cond: &Tensor<T>,
    mut x: Tensor<T>,
    from: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    mode: SampleMode,
) -> Result<(Tensor<T>, Vec<TraceEntry>)> {
    if from > sched.steps() {
        return invalid(format!("start step {from} beyond schedule length {}", sched.steps()));
    }
    let b = x.shape()[0];
    let mut trace = Vec::with_capacity(from);
    for t in (1..=from).rev() {
        let eps = {
            let g = Graph::new();
            let cx = Ctx::frozen(&g, params);
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            let e = predictor.predict(&cx, xv, &vec![t; b], cv)?;
            let out = g.value(e).clone();
            out
        };
        let beta = sched.beta(t);
        let c_eps = T::lit(beta / (1.0 - sched.alpha_bar(t)).sqrt());
        let inv = T::lit(1.0 / (1.0 - beta).sqrt());
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - c_eps * ev));
        if mode == SampleMode::Ancestral && t > 1 {
            let sd = sched.posterior_variance(t).sqrt();
            for v in next.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += T::lit(sd * z);
            }
        }
        if !next.all_finite() {
            return Err(Error::Numeric(format!("non-finite latent at sampling step {t}")));
        }
        let n = next.numel() as f64;
        let mean = next.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = next.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        trace.push(TraceEntry { step: t, mean, std: var.sqrt() });
        x = next;
    }
    Ok((x, trace))
}
