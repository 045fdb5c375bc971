//! Teacher features and the token-subset distillation loss.

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{invalid, Result};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{mix, seeded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TEACHER_PREFIX: &str = "teacher";
pub const DEFAULT_TEACHER_SEED: u64 = 20_250_821;

/// Frozen stand-in for a pretrained feature teacher: an encoder with the
/// student's token geometry and weights drawn from a fixed seed.
#[derive(Clone, Debug)]
pub struct TeacherStub<T> {
    pub seed: u64,
    encoder: Encoder,
    params: ParamStore<T>,
}

impl<T: Scalar> TeacherStub<T> {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::with_prefix(cfg, TEACHER_PREFIX)?;
        let mut params = ParamStore::new();
        encoder.init(&mut params, &mut seeded(seed));
        Ok(Self { seed, encoder, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Teacher tokens `[B, N, d]` for images `[B, H, W, 3]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let cx = Ctx::frozen(&g, &self.params);
        let z = self.encoder.forward(&cx, images)?;
        let out = g.value(z).clone();
        Ok(out)
    }
}

/// Seed of the subset drawn at `step` of a run.
pub fn subset_seed(step: u64, run_seed: u64) -> u64 {
    mix(run_seed, step)
}

/// `⌈fraction · n⌉` distinct token indices, sorted.
pub fn sample_token_subset(n_tokens: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("subset fraction must be in (0, 1], got {fraction}"));
    }
    let k = ((fraction * n_tokens as f64).ceil() as usize).min(n_tokens);
    if k == n_tokens {
        return Ok((0..n_tokens).collect());
    }
    let mut idx = sample(&mut seeded(seed), n_tokens, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `α (1 − mean cos(z_i, ẑ_i)) + β mean_i mean_k |z_ik − ẑ_ik|` over the
/// rows of `z` and `z_hat` (`[M, d]`).
///
/// A row of zero norm on either side contributes cosine 0 and is reported
/// through the log.
pub fn kd_loss<T: Scalar>(g: &Graph<T>, z: Var, z_hat: Var, alpha: f64, beta: f64) -> Result<Var> {
    let (zs, hs) = (g.shape(z), g.shape(z_hat));
    if zs != hs {
        return invalid(format!("kd_loss shape mismatch {zs:?} vs {hs:?}"));
    }
    if zs.iter().product::<usize>() == 0 {
        return invalid("kd_loss needs a nonempty token subset");
    }
    let zero_rows = {
        let (a, b) = (g.value(z), g.value(z_hat));
        let d = a.last_dim();
        a.data()
            .chunks(d)
            .zip(b.data().chunks(d))
            .filter(|(x, y)| x.iter().all(|v| *v == T::zero()) || y.iter().all(|v| *v == T::zero()))
            .count()
    };
    if zero_rows > 0 {
        log::warn!("kd_loss: {zero_rows} zero-norm token(s); cosine taken as 0");
    }
    let cos = g.cosine_rows(z, z_hat);
    let mean_cos = g.mean(cos);
    let dir = g.add_scalar(g.neg(mean_cos), T::one());
    let l1 = g.mean(g.abs(g.sub(z, z_hat)));
    Ok(g.add(g.scale(dir, T::lit(alpha)), g.scale(l1, T::lit(beta))))
}

/// Gathers per-image token subsets of `[B, N, d]` tensors into `[M, d]`
/// and applies [`kd_loss`].
pub fn kd_loss_subsets<T: Scalar>(
    g: &Graph<T>,
    z: Var,
    z_hat: Var,
    subsets: &[Vec<usize>],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let s = g.shape(z);
    if s.len() != 3 || subsets.len() != s[0] {
        return invalid(format!("expected one subset per image of a [B, N, d] batch, got {} for {s:?}", subsets.len()));
    }
    let (n, d) = (s[1], s[2]);
    let mut rows = Vec::new();
    for (b, sub) in subsets.iter().enumerate() {
        if let Some(&bad) = sub.iter().find(|&&i| i >= n) {
            return invalid(format!("token index {bad} out of range {n}"));
        }
        rows.extend(sub.iter().map(|&i| b * n + i));
    }
    let zf = g.reshape(z, vec![s[0] * n, d]);
    let hf = g.reshape(z_hat, vec![s[0] * n, d]);
    let zr = g.index_select(zf, 0, &rows);
    let hr = g.index_select(hf, 0, &rows);
    kd_loss(g, zr, hr, alpha, beta)
}
