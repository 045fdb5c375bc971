//! Central finite-difference checks for tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient norm below which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst norm-wise relative error over all checked inputs.
    pub max_rel_err: f64,
    /// Per input: (relative error, coordinates checked).
    pub per_input: Vec<(f64, usize)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences of step `h`. At most `max_coords` randomly chosen coordinates
/// of each input are perturbed.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, max_coords: usize, seed: u64) -> GradReport
where
    F: Fn(&Graph<f64>, &[Var]) -> Var,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars);
        let grads = g.backward(loss);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars);
        g.item(loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in &coords {
            let mut xs = inputs.to_vec();
            let x0 = t.data()[c];
            xs[i].data_mut()[c] = x0 + h;
            let fp = eval(&xs);
            xs[i].data_mut()[c] = x0 - h;
            let fm = eval(&xs);
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[i].data()[c];
            diff2 += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
        }
        // inputs with (near-)vanishing gradients are compared absolutely
        let denom = a2.sqrt().max(n2.sqrt()).max(GRAD_FLOOR);
        let rel = diff2.sqrt() / denom;
        worst = worst.max(rel);
        per_input.push((rel, coords.len()));
    }
    GradReport { max_rel_err: worst, per_input }
}
