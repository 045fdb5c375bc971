//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion names as arguments to run a subset.

mod gradients;
mod oracles;
mod stats;
mod training;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use uniugg_core::autodiff::Graph;
use uniugg_core::encoder::EncoderConfig;
use uniugg_core::harness::{Checkpoint, RunConfig, Stage};
use uniugg_core::nn::{Ctx, ParamStore};
use uniugg_core::rng::seeded;
use uniugg_core::spatial_vae::{SpatialVae, VaeConfig};
use uniugg_core::Tensor;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

fn timed(name: &'static str, budget: f64, f: impl FnOnce() -> (bool, String)) -> Line {
    let t = Instant::now();
    let (pass, detail) = f();
    let seconds = t.elapsed().as_secs_f64();
    Line { name, pass: pass && seconds < budget, detail, seconds, budget }
}

fn loss_oracles() -> (bool, String) {
    let results = [
        ("kd", oracles::kd()),
        ("rgb", oracles::rgb()),
        ("conf", oracles::conf()),
        ("match", oracles::matching()),
        ("kl", oracles::kl()),
        ("gen", oracles::generation()),
        ("vqa", oracles::vqa()),
    ];
    let pass = results.iter().all(|(_, r)| r.cases == oracles::CASES && r.worst <= 1e-10);
    let detail = results.iter().map(|(n, r)| format!("{n} {:.1e}", r.worst)).collect::<Vec<_>>().join(", ");
    (pass, format!("{} cases each, worst relative error: {detail}", oracles::CASES))
}

fn gradient_suite() -> (bool, String) {
    let r = gradients::suite();
    let pass = r.iter().all(|(_, g)| g.passes(1e-4));
    let detail = r.iter().map(|(n, g)| format!("{n} {:.1e}", g.max_rel_err)).collect::<Vec<_>>().join(", ");
    (pass, format!("max relative error: {detail}"))
}

fn geometry() -> (bool, String) {
    let r = stats::raymaps();
    let (reproj, pixels) = stats::reprojection(100);
    let pass = r.max_norm_err <= 1e-9 && r.max_orth <= 1e-9 && r.max_moment_err <= 1e-9 && reproj < 1e-4 && pixels > 0;
    (
        pass,
        format!(
            "{} raymaps: |‖d‖−1| {:.1e}, |d·m| {:.1e}, vs hand-built rays {:.1e}; reprojection {:.1e} px over {pixels} pixels of 100 scenes",
            r.maps, r.max_norm_err, r.max_orth, r.max_moment_err, reproj
        ),
    )
}

fn diffusion() -> (bool, String) {
    let (closed, chain) = stats::marginals();
    let worst = |v: &[stats::MarginalCheck]| v.iter().map(|c| c.z_mean.max(c.z_var)).fold(0.0, f64::max);
    let t = Instant::now();
    let m = stats::two_modes();
    let toy_s = t.elapsed().as_secs_f64();
    let err = (m.recovered[0] - m.modes[0]).abs().max((m.recovered[1] - m.modes[1]).abs());
    let ts: Vec<usize> = closed.iter().map(|c| c.t).collect();
    let pass = worst(&closed) < 3.0 && worst(&chain) < 3.0 && err < 0.1 && toy_s < 120.0;
    (
        pass,
        format!(
            "q_sample at t={ts:?}, 1e5 draws: worst {:.2} SE vs closed form, {:.2} SE vs simulated chain; two-mode toy ({} steps, {toy_s:.0}s, loss {:.3}): means {:.3}/{:.3} for {}/{}, weights {:.2}/{:.2}",
            worst(&closed),
            worst(&chain),
            m.steps,
            m.final_loss,
            m.recovered[0],
            m.recovered[1],
            m.modes[0],
            m.modes[1],
            m.weights[0],
            m.weights[1]
        ),
    )
}

/// Full-scale geometry: 14×14 tokens of width 1024, hidden 256, latent
/// width 128.
fn full_scale_shapes() -> (bool, String) {
    let enc = EncoderConfig { image_height: 224, image_width: 224, patch_size: 16, dim: 1024, depth: 1, heads: 16, mlp_ratio: 4 };
    let vae = SpatialVae::new(&enc, &VaeConfig { hidden: 256, width: 128, blocks: 1, heads: 4, mlp_ratio: 1 }).unwrap();
    let mut s = ParamStore::<f32>::new();
    vae.init(&mut s, &mut seeded(0));
    let g = Graph::new();
    let cx = Ctx::frozen(&g, &s);
    let z = g.constant(Tensor::zeros(vec![1, 196, 1024]));
    let (mu, lv) = vae.encode(&cx, z).unwrap();
    let out = vae.decode(&cx, mu).unwrap();
    let w = |n: &str| s.get(&format!("vae.{n}.weight")).map(|t| t.shape()[..2].to_vec()).unwrap_or_default();
    let pass = g.shape(mu) == [1, 28, 28, 4]
        && g.shape(lv) == [1, 28, 28, 4]
        && g.shape(out) == [1, 196, 1024]
        && w("enc.conv_in") == [256, 1024]
        && w("dec.conv_out") == [1024, 256]
        && vae.latent_grid() == (28, 28);
    (pass, format!("[1,196,1024] → μ {:?}, log σ² {:?} → {:?}", g.shape(mu), g.shape(lv), g.shape(out)))
}

fn additivity() -> (bool, String) {
    let a = gradients::additivity();
    let pass = a.spatial_err <= 1e-12 && a.vae_err <= 1e-12 && a.gamma == (1e-4, 1e-4);
    (pass, format!("|L_s − Σ| {:.1e}, |L_vae − Σ| {:.1e}, default γ {:?}", a.spatial_err, a.vae_err, a.gamma))
}

fn run_cli(args: &[&str], extra: &[&Path]) -> std::process::Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uniugg-mini"));
    c.args(args).args(extra).env("RUST_LOG", "warn");
    let out = c.output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every CLI command twice, in two fresh directories.
fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let mut roots = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let data = root.join("data");
        let run = root.join("run");
        fs::create_dir_all(&root).unwrap();
        let mut c = RunConfig::toy(Stage::EncoderPretrain);
        c.model = gradients::small_model();
        c.dataset.scene = uniugg_core::geometry::SceneConfig { width: 16, height: 16, min_correspondences: 8, ..Default::default() };
        c.dataset.dir = Some(data.clone());
        c.optimizer.total_steps = 3;
        c.optimizer.batch_size = 2;
        c.out_dir = run.clone();
        let cfg = root.join("config.json");
        fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
        let cfg = cfg.as_path();
        run_cli(&["gen-data", "--seed", "5", "--n", "3", "--config"], &[cfg, Path::new("--out"), &data]);
        run_cli(&["pretrain-encoder", "--config"], &[cfg]);
        run_cli(&["train-vae", "--config"], &[cfg, Path::new("--encoder-ckpt"), &run.join("encoder_pretrain.ckpt")]);
        let mut prev = run.join("vae.ckpt");
        for s in ["1", "2", "3"] {
            run_cli(&["train-unified", "--stage", s, "--config"], &[cfg, Path::new("--init-ckpt"), &prev]);
            prev = run.join(format!("unified_s{s}.ckpt"));
        }
        let scene = data.join("pair_0001");
        let args = ["generate", "--pose", "0.02", "-0.1", "0", "0.3", "0.05", "0", "--seed", "7", "--question", "how many objects are visible ?", "--ckpt"];
        run_cli(&args, &[&prev, Path::new("--scene-dir"), &scene, Path::new("--out"), &root.join("gen")]);
        run_cli(&["evaluate", "--seeds", "0,1", "--ckpt"], &[&prev, Path::new("--data-dir"), &data, Path::new("--report"), &root.join("report.json")]);
        run_cli(&["print-config"], &[]);
        roots.push(root);
    }
    let mut files = vec!["data/qa.jsonl".to_string(), "data/vocab.json".into(), "data/pair_0002/image_j.ppm".into()];
    for s in ["encoder_pretrain", "vae", "unified_s1", "unified_s2", "unified_s3"] {
        files.push(format!("run/{s}_metrics.jsonl"));
    }
    files.extend(["gen/ref_pointmap.ply", "gen/gen_pointmap.ply", "gen/answer.txt", "report.json"].map(String::from));
    let differing: Vec<&String> = files.iter().filter(|f| fs::read(roots[0].join(f)).unwrap() != fs::read(roots[1].join(f)).unwrap()).collect();
    // checkpoints embed their own output paths, so only their tensors are compared
    let stages = ["encoder_pretrain", "vae", "unified_s1", "unified_s2", "unified_s3"];
    let load = |r: &Path, s: &str| Checkpoint::load(&r.join(format!("run/{s}.ckpt"))).unwrap();
    let params_differ: Vec<&str> = stages
        .into_iter()
        .filter(|s| {
            let (a, b) = (load(&roots[0], s), load(&roots[1], s));
            a.params != b.params || a.optimizer != b.optimizer || a.step != b.step
        })
        .collect();
    (
        differing.is_empty() && params_differ.is_empty(),
        format!(
            "{} outputs of 9 commands compared byte for byte, {} differ {differing:?}; checkpoint tensors differ for {params_differ:?}",
            files.len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut lines: Vec<Line> = Vec::new();
    let mut report = |l: Line| {
        println!("{} {:<22} {:>7.1}s / {:>5.0}s  {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.seconds, l.budget, l.detail);
        lines.push(l);
    };

    if want("loss_oracles") {
        report(timed("loss_oracles", 60.0, loss_oracles));
    }
    if want("gradients") {
        report(timed("gradients", 300.0, gradient_suite));
    }
    if want("geometry") {
        report(timed("geometry", 60.0, geometry));
    }
    if want("diffusion") {
        report(timed("diffusion", 180.0, diffusion));
    }
    if want("additivity") {
        report(timed("additivity", 60.0, additivity));
    }
    if want("determinism") {
        report(timed("determinism", 300.0, determinism));
    }

    let learned = ["spatial_vae", "encoder_decoder", "generation", "vqa"];
    if learned.iter().any(|n| want(n)) {
        let tmp = tempfile::tempdir().unwrap();
        let runs = training::train_chain(tmp.path());
        for r in &runs {
            println!("     trained {:<17} {:>5} steps in {:>6.1}s", r.stage.name(), r.steps, r.seconds);
        }
        let secs = |s: Stage| runs.iter().find(|r| r.stage == s).unwrap().seconds;
        let ck = |s: Stage| &runs.iter().find(|r| r.stage == s).unwrap().checkpoint;

        if want("spatial_vae") {
            let (shape_ok, shapes) = full_scale_shapes();
            let l = training::load(ck(Stage::Vae));
            let before = training::vae_mse(&l, &training::vae_at_init(&l));
            let after = training::vae_mse(&l, &l.params);
            let ratio = before / after;
            let steps = training::SCHEDULE[1].1;
            let mut line = timed("spatial_vae", 300.0, || {
                (shape_ok && ratio >= 10.0 && steps <= 2000, format!("{shapes}; MSE on 8 grids {before:.4} → {after:.4} ({ratio:.1}×) in {steps} steps"))
            });
            line.seconds += secs(Stage::Vae);
            line.pass &= line.seconds < line.budget;
            report(line);
        }
        if want("encoder_decoder") {
            let l = training::load(ck(Stage::EncoderPretrain));
            let mut line = timed("encoder_decoder", 900.0, || {
                let r = training::report(&l, &[]);
                let steps = training::SCHEDULE[0].1;
                (r.mean_abs_rel < 0.15 && steps <= 5000, format!("Abs Rel {:.4} (δ<1.25 {:.3}) on 8 training pairs after {steps} steps", r.mean_abs_rel, r.mean_delta_125))
            });
            line.seconds += secs(Stage::EncoderPretrain);
            line.pass &= line.seconds < line.budget;
            report(line);
        }
        if want("generation") {
            let l = training::load(ck(Stage::UnifiedS3));
            let mut line = timed("generation", 600.0, || {
                let r = training::report(&l, &[0, 1, 2, 3]);
                let (g, b) = (r.mean_gen_chamfer.unwrap(), r.mean_baseline_chamfer.unwrap());
                let s2 = training::report(&training::load(ck(Stage::UnifiedS2)), &[0, 1, 2, 3]);
                let s2_ratio = s2.mean_gen_chamfer.unwrap() / s2.mean_baseline_chamfer.unwrap();
                (
                    g <= 0.5 * b && r.scenes.len() == 8,
                    format!("Chamfer generated {g:.4} vs random latent {b:.4} (ratio {:.3}; after stage 2 {s2_ratio:.3}), 8 scenes × 4 seeds", g / b),
                )
            });
            line.seconds += secs(Stage::UnifiedS1) + secs(Stage::UnifiedS2);
            line.pass &= line.seconds < line.budget;
            report(line);
            let ident = training::identity_consistency(&l);
            println!("INFO identity pose: Chamfer(generated, reference) {ident:.4} averaged over 8 scenes");
        }
        if want("vqa") {
            let l = training::load(ck(Stage::UnifiedS3));
            let mut extra = None;
            let mut line = timed("vqa", 300.0, || {
                let s = training::vqa(&l);
                extra = Some(s.generated_agree);
                (
                    s.gated_total == 8 && s.gated_correct == 8,
                    format!("{}/{} exact match (all three templates: {}/{})", s.gated_correct, s.gated_total, s.all_correct, s.all_total),
                )
            });
            line.seconds += secs(Stage::UnifiedS3);
            line.pass &= line.seconds < line.budget;
            report(line);
            println!("INFO generated view-j grids give the real-grid answer for {}/8 questions", extra.unwrap());
        }
    }

    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
