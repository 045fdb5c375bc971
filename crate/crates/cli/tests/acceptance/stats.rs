//! Geometry invariants and diffusion statistics.

use rand::Rng;
use uniugg_core::autodiff::Graph;
use uniugg_core::diffusion::{draw_training_noise, gen_loss, make_schedule, q_sample, sample, Denoiser, DenoiserConfig, SampleMode};
use uniugg_core::geometry::{generate_scene_pair, plucker_raymap, Intrinsics, Pose, SceneConfig, Vec3};
use uniugg_core::nn::{Ctx, ParamStore, Trainable};
use uniugg_core::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use uniugg_core::rng::{mix, seeded};
use uniugg_core::Tensor;

pub struct RaymapStats {
    pub maps: usize,
    pub max_norm_err: f64,
    pub max_orth: f64,
    /// Against `o × d` with `d` rebuilt from the pose matrix by hand.
    pub max_moment_err: f64,
}

pub fn raymaps() -> RaymapStats {
    let mut rng = seeded(11);
    let mut s = RaymapStats { maps: 1000, max_norm_err: 0.0, max_orth: 0.0, max_moment_err: 0.0 };
    for _ in 0..s.maps {
        let (w, h) = (rng.random_range(8..128usize), rng.random_range(8..128usize));
        let k = Intrinsics::new(
            rng.random_range(5.0..200.0),
            rng.random_range(5.0..200.0),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            w,
            h,
        )
        .unwrap();
        let aa = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let pose = Pose::from_axis_angle(aa, t);
        let (gh, gw) = (rng.random_range(1..9), rng.random_range(1..9));
        let map = plucker_raymap(&k, &pose, gh, gw).unwrap();
        let r = pose.rotation_row_major();
        for row in 0..gh {
            for col in 0..gw {
                let c = map.cell(row, col);
                let (d, m) = ([c[0], c[1], c[2]], [c[3], c[4], c[5]]);
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                s.max_norm_err = s.max_norm_err.max((n - 1.0).abs());
                s.max_orth = s.max_orth.max((d[0] * m[0] + d[1] * m[1] + d[2] * m[2]).abs());
                let u = (col as f64 + 0.5) * w as f64 / gw as f64;
                let v = (row as f64 + 0.5) * h as f64 / gh as f64;
                let ray = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
                let mut e = [0.0; 3];
                for i in 0..3 {
                    e[i] = (0..3).map(|j| r[3 * i + j] * ray[j]).sum();
                }
                let en = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
                let e = [e[0] / en, e[1] / en, e[2] / en];
                let want = [t.y * e[2] - t.z * e[1], t.z * e[0] - t.x * e[2], t.x * e[1] - t.y * e[0]];
                for i in 0..3 {
                    s.max_moment_err = s.max_moment_err.max((m[i] - want[i]).abs()).max((d[i] - e[i]).abs());
                }
            }
        }
    }
    s
}

/// Largest pixel distance between a valid pixel's center and the projection
/// of its ground-truth point, over both views of `n` scenes.
pub fn reprojection(n: u64) -> (f64, usize) {
    let cfg = SceneConfig::default();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..n {
        let p = generate_scene_pair(10_000 + seed, &cfg).unwrap();
        let k = p.intrinsics;
        let rel = p.relative();
        let (r, t) = (rel.rotation_row_major(), rel.translation());
        let t = [t.x, t.y, t.z];
        let w = k.width;
        for (view, pts, mask) in [(0, &p.gt_pointmap_ii, &p.valid_mask_i), (1, &p.gt_pointmap_ji, &p.valid_mask_j)] {
            for (pix, (x, &valid)) in pts.chunks(3).zip(mask).enumerate() {
                if !valid {
                    continue;
                }
                let q: [f64; 3] = if view == 0 {
                    [x[0], x[1], x[2]]
                } else {
                    std::array::from_fn(|i| r[3 * i] * x[0] + r[3 * i + 1] * x[1] + r[3 * i + 2] * x[2] + t[i])
                };
                let (u, v) = (k.fx * q[0] / q[2] + k.cx, k.fy * q[1] / q[2] + k.cy);
                let (pu, pv) = ((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
                worst = worst.max(((u - pu).powi(2) + (v - pv).powi(2)).sqrt());
                count += 1;
            }
        }
    }
    (worst, count)
}

pub struct MarginalCheck {
    pub t: usize,
    /// Deviations in standard errors: mean, variance.
    pub z_mean: f64,
    pub z_var: f64,
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// `q_sample` draws against the closed-form Gaussian, and against the
/// step-by-step forward chain simulated with independent noise.
pub fn marginals() -> (Vec<MarginalCheck>, Vec<MarginalCheck>) {
    const N: usize = 100_000;
    let sched = make_schedule(100, 1e-4, 0.02).unwrap();
    let x0v = 0.7;
    let x0 = Tensor::full(vec![N], x0v);
    let mut closed = Vec::new();
    let mut chain = Vec::new();
    let mut rng = seeded(12);
    for t in [1usize, 10, 50, 100] {
        let ab: f64 = (1..=t).map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * (s - 1) as f64 / 99.0)).product();
        let eps = Tensor::<f64>::randn(vec![N], 1.0, &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let (m, v) = moments(xt.data());
        let (mu, var) = (ab.sqrt() * x0v, 1.0 - ab);
        closed.push(MarginalCheck { t, z_mean: (m - mu).abs() / (var / N as f64).sqrt(), z_var: (v - var).abs() / (var * (2.0 / (N - 1) as f64).sqrt()) });
        if t <= 50 {
            let mut x = vec![x0v; N];
            for s in 1..=t {
                let b = sched.beta(s);
                let noise = Tensor::<f64>::randn(vec![N], 1.0, &mut rng);
                for (xi, e) in x.iter_mut().zip(noise.data()) {
                    *xi = (1.0 - b).sqrt() * *xi + b.sqrt() * e;
                }
            }
            let (cm, cv) = moments(&x);
            // two independent samples: standard error of the difference
            let se_m = (2.0 * var / N as f64).sqrt();
            let se_v = var * (4.0 / (N - 1) as f64).sqrt();
            chain.push(MarginalCheck { t, z_mean: (cm - m).abs() / se_m, z_var: (cv - v).abs() / se_v });
        }
    }
    (closed, chain)
}

pub struct TwoModes {
    pub modes: [f64; 2],
    pub recovered: [f64; 2],
    pub weights: [f64; 2],
    pub steps: u64,
    pub final_loss: f64,
}

/// Trains a one-cell denoiser on an equal mixture of N(−1, 0.1²) and
/// N(1.5, 0.1²), then samples it.
pub fn two_modes() -> TwoModes {
    const MODES: [f64; 2] = [-1.0, 1.5];
    const STEPS: u64 = 1500;
    const BATCH: usize = 256;
    // β up to 0.2 so that x_T is close to N(0, 1)
    let sched = make_schedule(100, 1e-4, 0.2).unwrap();
    let den = Denoiser::new(&DenoiserConfig { dim: 32, depth: 2, heads: 2, mlp_ratio: 2 }, (1, 1), 1, 4).unwrap();
    let mut params = ParamStore::<f32>::new();
    den.init(&mut params, &mut seeded(13));
    let mut opt = AdamW::new(AdamWConfig::default());
    let cond = Tensor::<f32>::zeros(vec![BATCH, 1, 4]);
    let mut final_loss = 0.0;
    for step in 0..STEPS {
        let mut rng = seeded(mix(14, step));
        let x0: Vec<f32> = (0..BATCH)
            .map(|_| {
                let m = MODES[rng.random_range(0..2)];
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                (m + 0.1 * e) as f32
            })
            .collect();
        let x0 = Tensor::from_vec(vec![BATCH, 1, 1, 1], x0);
        let (t, eps) = draw_training_noise::<f32>(&[BATCH, 1, 1, 1], sched.steps(), mix(15, step));
        let mut grads = {
            let g = Graph::new();
            let cx = Ctx::new(&g, &params, Trainable::All);
            let loss = gen_loss(&cx, &den, &x0, g.constant(cond.clone()), &t, &eps, &sched).unwrap();
            final_loss = g.item(loss) as f64;
            cx.collect_grads(g.backward(loss))
        };
        clip_grad_norm(&mut grads, 1.0);
        opt.update(&mut params, &grads, cosine_lr(step, STEPS, 0.03, 2e-3)).unwrap();
    }
    const N: usize = 4000;
    let cond = Tensor::<f32>::zeros(vec![N, 1, 4]);
    let x = sample(&den, &params, &cond, &[N, 1, 1, 1], &sched, 16, SampleMode::Ancestral).unwrap();
    let split = 0.5 * (MODES[0] + MODES[1]);
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    for &v in x.data() {
        let k = usize::from(v as f64 > split);
        sums[k] += v as f64;
        counts[k] += 1;
    }
    TwoModes {
        modes: MODES,
        recovered: [sums[0] / counts[0].max(1) as f64, sums[1] / counts[1].max(1) as f64],
        weights: [counts[0] as f64 / N as f64, counts[1] as f64 / N as f64],
        steps: STEPS,
        final_loss,
    }
}
