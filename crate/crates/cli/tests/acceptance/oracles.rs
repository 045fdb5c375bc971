//! Straight-loop recomputations of every training loss, written against the
//! formulas rather than the graph code.

use rand::Rng;
use uniugg_core::autodiff::{Graph, Var};
use uniugg_core::conditioner::{vqa_loss, Conditioner, ConditionerConfig, Vocab};
use uniugg_core::diffusion::{gen_loss, make_schedule, NoisePredictor};
use uniugg_core::distill::{kd_loss, kd_loss_subsets, sample_token_subset};
use uniugg_core::encoder::{rgb_loss, EncoderConfig, PerceptualProxy, RgbLossConfig};
use uniugg_core::nn::{Ctx, ParamStore};
use uniugg_core::rng::seeded;
use uniugg_core::spatial_decoder::{conf_loss, match_loss};
use uniugg_core::spatial_vae::kl_loss;
use uniugg_core::{Result, Tensor};

pub const CASES: u64 = 100;

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>()).map(|_| gauss(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller, kept local so inputs do not come from the library's sampler
    let u: f64 = rng.random_range(1e-12..1.0);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Worst relative deviation over all cases.
pub struct OracleResult {
    pub cases: u64,
    pub worst: f64,
}

fn run(mut case: impl FnMut(u64) -> (f64, f64)) -> OracleResult {
    let mut worst: f64 = 0.0;
    for k in 0..CASES {
        let (got, want) = case(k);
        let err = if got.is_finite() && want.is_finite() { (got - want).abs() / want.abs().max(1.0) } else { f64::INFINITY };
        worst = worst.max(err);
    }
    OracleResult { cases: CASES, worst }
}

fn eval(f: impl FnOnce(&Graph<f64>) -> Var) -> f64 {
    let g = Graph::new();
    let v = f(&g);
    g.item(v)
}

fn kd_rows(z: &[f64], h: &[f64], d: usize, alpha: f64, beta: f64) -> f64 {
    let m = z.len() / d;
    let mut cos = 0.0;
    for r in 0..m {
        let (a, b) = (&z[r * d..(r + 1) * d], &h[r * d..(r + 1) * d]);
        let (na, nb) = (norm(a), norm(b));
        cos += if na == 0.0 || nb == 0.0 { 0.0 } else { dot(a, b) / (na * nb) };
    }
    let l1 = z.iter().zip(h).map(|(a, b)| (a - b).abs()).sum::<f64>() / z.len() as f64;
    alpha * (1.0 - cos / m as f64) + beta * l1
}

pub fn kd() -> OracleResult {
    run(|k| {
        let mut rng = seeded(1000 + k);
        let (alpha, beta) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let d = rng.random_range(1..7);
        if k % 2 == 0 {
            let m = rng.random_range(1..9);
            let (z, h) = (randn(&[m, d], &mut rng), randn(&[m, d], &mut rng));
            let got = eval(|g| kd_loss(g, g.constant(z.clone()), g.constant(h.clone()), alpha, beta).unwrap());
            (got, kd_rows(z.data(), h.data(), d, alpha, beta))
        } else {
            let (b, n) = (rng.random_range(1..4), rng.random_range(2..10));
            let (z, h) = (randn(&[b, n, d], &mut rng), randn(&[b, n, d], &mut rng));
            let subsets: Vec<Vec<usize>> = (0..b).map(|i| sample_token_subset(n, 0.5, 77 * k + i as u64).unwrap()).collect();
            let got = eval(|g| kd_loss_subsets(g, g.constant(z.clone()), g.constant(h.clone()), &subsets, alpha, beta).unwrap());
            let (mut zs, mut hs) = (Vec::new(), Vec::new());
            for (i, sub) in subsets.iter().enumerate() {
                for &t in sub {
                    let o = (i * n + t) * d;
                    zs.extend_from_slice(&z.data()[o..o + d]);
                    hs.extend_from_slice(&h.data()[o..o + d]);
                }
            }
            (got, kd_rows(&zs, &hs, d, alpha, beta))
        }
    })
}

// Feature maps are stored channel-major: [c][y][x].
fn proxy_distance(a: &[f64], b: &[f64], h: usize, w: usize, weights: &[Tensor<f64>]) -> f64 {
    fn pyramid(img: &[f64], h: usize, w: usize, weights: &[Tensor<f64>]) -> Vec<(usize, usize, usize, Vec<f64>)> {
        let mut cur = vec![0.0; 4 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                cur[c * h * w + p] = img[p * 3 + c];
            }
            cur[3 * h * w + p] = 1.0;
        }
        let mut maps = vec![(4, h, w, cur.clone())];
        let (mut ci, mut hi, mut wi) = (4, h, w);
        for wt in weights {
            let co = wt.shape()[0];
            let (ho, wo) = ((hi - 1) / 2 + 1, (wi - 1) / 2 + 1);
            let mut next = vec![0.0; co * ho * wo];
            for o in 0..co {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = ((2 * y + ky) as isize - 1, (2 * x + kx) as isize - 1);
                                    if iy < 0 || ix < 0 || iy as usize >= hi || ix as usize >= wi {
                                        continue;
                                    }
                                    s += cur[(c * hi + iy as usize) * wi + ix as usize] * wt.data()[((o * ci + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        next[(o * ho + y) * wo + x] = s.max(0.0);
                    }
                }
            }
            cur = next;
            (ci, hi, wi) = (co, ho, wo);
            maps.push((ci, hi, wi, cur.clone()));
        }
        maps
    }
    let (pa, pb) = (pyramid(a, h, w, weights), pyramid(b, h, w, weights));
    let mut total = 0.0;
    for ((c, hh, ww, x), (_, _, _, y)) in pa.iter().zip(&pb) {
        let n = hh * ww;
        let mut stage = 0.0;
        for p in 0..n {
            let xs: Vec<f64> = (0..*c).map(|k| x[k * n + p]).collect();
            let ys: Vec<f64> = (0..*c).map(|k| y[k * n + p]).collect();
            let (nx, ny) = (norm(&xs).max(1e-8), norm(&ys).max(1e-8));
            stage += xs.iter().zip(&ys).map(|(u, v)| (u / nx - v / ny).powi(2)).sum::<f64>();
        }
        total += stage / n as f64;
    }
    total
}

fn ssim_image(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, usize) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y in 0..h - 2 {
            for x in 0..w - 2 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let i = ((y + dy) * w + x + dx) * 3 + c;
                        ma += a[i] / 9.0;
                        mb += b[i] / 9.0;
                        saa += a[i] * a[i] / 9.0;
                        sbb += b[i] * b[i] / 9.0;
                        sab += a[i] * b[i] / 9.0;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    (sum, count)
}

pub fn rgb() -> OracleResult {
    let proxy = PerceptualProxy::<f64>::new();
    run(|k| {
        let mut rng = seeded(2000 + k);
        let (b, h, w) = (rng.random_range(1..3), rng.random_range(3..13), rng.random_range(3..13));
        let pred = uniform(&[b, h, w, 3], 0.0, 1.0, &mut rng);
        let target = uniform(&[b, h, w, 3], 0.0, 1.0, &mut rng);
        let cfg = RgbLossConfig {
            lambda_l1: rng.random_range(0.0..2.0),
            lambda_perc: if k % 4 == 3 { 0.0 } else { rng.random_range(0.0..2.0) },
            use_l2: rng.random_bool(0.5),
            lambda_l2: rng.random_range(0.0..2.0),
            use_ssim: rng.random_bool(0.5),
            lambda_ssim: rng.random_range(0.0..2.0),
        };
        let got = eval(|g| rgb_loss(g, g.constant(pred.clone()), g.constant(target.clone()), &cfg, &proxy).unwrap());
        let (p, t) = (pred.data(), target.data());
        let n = p.len() as f64;
        let mut want = cfg.lambda_l1 * p.iter().zip(t).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let per = h * w * 3;
        if cfg.lambda_perc != 0.0 {
            // the batch distance averages positions over all images
            let d: f64 = (0..b).map(|i| proxy_distance(&p[i * per..(i + 1) * per], &t[i * per..(i + 1) * per], h, w, &proxy.weights)).sum();
            want += cfg.lambda_perc * d / b as f64;
        }
        if cfg.use_l2 {
            want += cfg.lambda_l2 * p.iter().zip(t).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        }
        if cfg.use_ssim {
            let (mut s, mut c) = (0.0, 0);
            for i in 0..b {
                let (si, ci) = ssim_image(&p[i * per..(i + 1) * per], &t[i * per..(i + 1) * per], h, w);
                s += si;
                c += ci;
            }
            want += cfg.lambda_ssim * (1.0 - s / c as f64);
        }
        (got, want)
    })
}

pub fn conf() -> OracleResult {
    run(|k| {
        let mut rng = seeded(3000 + k);
        let (b, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let n = h * w;
        let pts = randn(&[b, h, w, 3], &mut rng).map(|v| v + 1.5);
        let gt = randn(&[b, h, w, 3], &mut rng).map(|v| v + 1.5);
        let conf = randn(&[b, h, w], &mut rng).map(|v| 1.0 + v.exp());
        let mut mask: Vec<bool> = (0..b * n).map(|_| rng.random_bool(0.7)).collect();
        for i in 0..b {
            mask[i * n + rng.random_range(0..n)] = true;
        }
        let a = rng.random_range(0.0..0.5);
        let got = eval(|g| conf_loss(g, g.constant(pts.clone()), g.constant(conf.clone()), &gt, &mask, a).unwrap());
        let mut want = 0.0;
        for i in 0..b {
            let valid: Vec<usize> = (0..n).filter(|&p| mask[i * n + p]).collect();
            let at = |t: &Tensor<f64>, p: usize| t.data()[(i * n + p) * 3..(i * n + p) * 3 + 3].to_vec();
            let sp = valid.iter().map(|&p| norm(&at(&pts, p))).sum::<f64>() / valid.len() as f64;
            let sg = valid.iter().map(|&p| norm(&at(&gt, p))).sum::<f64>() / valid.len() as f64;
            let mut acc = 0.0;
            for &p in &valid {
                let d: Vec<f64> = at(&pts, p).iter().zip(at(&gt, p)).map(|(x, y)| x / sp - y / sg).collect();
                let c = conf.data()[i * n + p];
                acc += c * norm(&d) - a * c.ln();
            }
            want += acc / valid.len() as f64;
        }
        (got, want / b as f64)
    })
}

pub fn matching() -> OracleResult {
    run(|k| {
        let mut rng = seeded(4000 + k);
        let (b, n, d) = (rng.random_range(1..4), rng.random_range(2..9), rng.random_range(2..6));
        let di = randn(&[b, n, d], &mut rng).map(|v| 0.6 * v);
        let dj = randn(&[b, n, d], &mut rng).map(|v| 0.6 * v);
        let pairs: Vec<Vec<(usize, usize)>> =
            (0..b).map(|_| (0..rng.random_range(1..6)).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect()).collect();
        let tau = rng.random_range(0.05..1.0);
        let got = eval(|g| match_loss(g, g.constant(di.clone()), g.constant(dj.clone()), &pairs, tau).unwrap());
        let row = |t: &Tensor<f64>, i: usize, r: usize| t.data()[(i * n + r) * d..(i * n + r + 1) * d].to_vec();
        let nll = |src: &[f64], other: &Tensor<f64>, i: usize, target: usize| {
            let logits: Vec<f64> = (0..n).map(|c| dot(src, &row(other, i, c)) / tau).collect();
            logsumexp(&logits) - logits[target]
        };
        let mut want = 0.0;
        for (i, pr) in pairs.iter().enumerate() {
            let ij: f64 = pr.iter().map(|&(a, c)| nll(&row(&di, i, a), &dj, i, c)).sum();
            let ji: f64 = pr.iter().map(|&(a, c)| nll(&row(&dj, i, c), &di, i, a)).sum();
            want += 0.5 * (ij + ji) / pr.len() as f64;
        }
        (got, want / b as f64)
    })
}

pub fn kl() -> OracleResult {
    run(|k| {
        let mut rng = seeded(5000 + k);
        let shape = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5), 4];
        let mu = randn(&shape, &mut rng);
        let lv = randn(&shape, &mut rng).map(|v| 1.5 * v);
        let got = eval(|g| kl_loss(g, g.constant(mu.clone()), g.constant(lv.clone())).unwrap());
        let s: f64 = mu.data().iter().zip(lv.data()).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum();
        (got, 0.5 * s / mu.numel() as f64)
    })
}

/// `ε̂ = a·x_t + v·t/T + u·mean(cond_b)`, elementwise in `a`.
struct AffinePredictor {
    a: f64,
    u: f64,
    v: f64,
    steps: usize,
}

impl NoisePredictor<f64> for AffinePredictor {
    fn predict(&self, cx: &Ctx<f64>, x: Var, t: &[usize], cond: Var) -> Result<Var> {
        let g = cx.g;
        let s = g.shape(x);
        let per = s[1..].iter().product::<usize>();
        let cv = g.value(cond).clone();
        let cper = cv.numel() / s[0];
        let mut offset = Vec::with_capacity(s[0] * per);
        for (b, &tb) in t.iter().enumerate() {
            let cm = cv.data()[b * cper..(b + 1) * cper].iter().sum::<f64>() / cper as f64;
            offset.extend(std::iter::repeat_n(self.v * tb as f64 / self.steps as f64 + self.u * cm, per));
        }
        Ok(g.add(g.scale(x, self.a), g.constant(Tensor::from_vec(s, offset))))
    }
}

pub fn generation() -> OracleResult {
    run(|k| {
        let mut rng = seeded(6000 + k);
        let steps = rng.random_range(2..60);
        let (b0, b1) = (rng.random_range(1e-4..1e-2), rng.random_range(0.02..0.3));
        let sched = make_schedule(steps, b0, b1).unwrap();
        let shape = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), 4];
        let x0 = randn(&shape, &mut rng);
        let eps = randn(&shape, &mut rng);
        let cond = randn(&[shape[0], 3, 5], &mut rng);
        let t: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
        let p = AffinePredictor { a: rng.random_range(-1.0..1.0), u: rng.random_range(-1.0..1.0), v: rng.random_range(-1.0..1.0), steps };
        let store = ParamStore::new();
        let got = eval(|g| {
            let cx = Ctx::frozen(g, &store);
            gen_loss(&cx, &p, &x0, g.constant(cond.clone()), &t, &eps, &sched).unwrap()
        });
        let per = x0.numel() / shape[0];
        let cper = cond.numel() / shape[0];
        let mut want = 0.0;
        for (b, &tb) in t.iter().enumerate() {
            // ᾱ_t = Π_{s ≤ t} (1 − β_s), β linear from b0 to b1 over the steps
            let ab: f64 = (1..=tb).map(|s| 1.0 - (b0 + (b1 - b0) * (s - 1) as f64 / (steps - 1) as f64)).product();
            let cm = cond.data()[b * cper..(b + 1) * cper].iter().sum::<f64>() / cper as f64;
            for i in b * per..(b + 1) * per {
                let xt = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
                let e = p.a * xt + p.v * tb as f64 / steps as f64 + p.u * cm;
                want += (e - eps.data()[i]).powi(2);
            }
        }
        (got, want / x0.numel() as f64)
    })
}

pub fn vqa_setup(seed: u64) -> (Conditioner, ParamStore<f64>) {
    let enc = EncoderConfig { image_height: 8, image_width: 8, patch_size: 4, dim: 8, depth: 1, heads: 2, mlp_ratio: 2 };
    let cfg = ConditionerConfig { dim: 8, depth: 1, heads: 2, mlp_ratio: 2, vocab: 48, max_text_len: 12 };
    let c = Conditioner::new(&enc, &cfg).unwrap();
    let mut s = ParamStore::new();
    c.init(&mut s, &mut seeded(seed));
    (c, s)
}

/// The teacher-forced loss must equal the mean next-token NLL obtained by
/// re-running the model on each answer prefix separately.
pub fn vqa() -> OracleResult {
    run(|k| {
        let (model, params) = vqa_setup(7000 + k);
        let mut rng = seeded(7500 + k);
        let z = randn(&[1, 4, 8], &mut rng);
        let question: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(3..48)).collect();
        let mut answer: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(3..48)).collect();
        answer.push(Vocab::END);
        let got = eval(|g| {
            let cx = Ctx::frozen(g, &params);
            vqa_loss(&cx, &model, g.constant(z.clone()), &question, &answer).unwrap()
        });
        let mut want = 0.0;
        for t in 0..answer.len() {
            let prefix: Vec<usize> = std::iter::once(Vocab::BOS).chain(answer[..t].iter().copied()).collect();
            let g = Graph::new();
            let cx = Ctx::frozen(&g, &params);
            let logits = model.answer_logits(&cx, g.constant(z.clone()), &question, &prefix).unwrap();
            let v = g.value(logits);
            let row = &v.data()[t * v.last_dim()..(t + 1) * v.last_dim()];
            want += logsumexp(row) - row[answer[t]];
        }
        (got, want / answer.len() as f64)
    })
}
