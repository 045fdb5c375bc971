//! AdamW and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup to `base_lr` over `warmup_ratio · total_steps`, then cosine
/// decay to zero at `total_steps`. Steps past the end stay at zero.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_ratio: f64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_ratio * total;
    if step < warm {
        return base_lr * step / warm;
    }
    let span = total - warm;
    if span <= 0.0 {
        return base_lr;
    }
    let progress = (step - warm) / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter named in `grads`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, gr) in grads {
            if !gr.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name} at step {}", self.step + 1)));
            }
            match params.get(name) {
                Some(p) if p.shape() == gr.shape() => {}
                Some(p) => return invalid(format!("gradient shape {:?} vs parameter {name} {:?}", gr.shape(), p.shape())),
                None => return invalid(format!("gradient for unknown parameter {name}")),
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(c.eps), T::lit(lr * c.weight_decay));
        for (name, gr) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape().to_vec()));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - decay * *pi - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = T::lit(max_norm / n);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}
