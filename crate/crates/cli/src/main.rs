use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uniugg_core::conditioner::Vocab;
use uniugg_core::diffusion::SampleMode;
use uniugg_core::geometry::io::load_pair;
use uniugg_core::geometry::{Pose, Vec3};
use uniugg_core::harness::data::{read_dataset, write_dataset};
use uniugg_core::harness::{run_stage, Checkpoint, RunConfig, Stage};
use uniugg_core::model::Model;
use uniugg_core::pipeline::{describe_scene, evaluate, generate_scene, write_answer, write_generation};

type Res<T> = Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "uniugg-mini", version, about = "Desk-scale spatial encoder, VAE and pose-conditioned latent generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Render scene pairs, questions and the vocabulary into a directory.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `dataset.scene` and `dataset.question_kinds` are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train encoder, RGB head and spatial decoder.
    PretrainEncoder {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the Spatial-VAE jointly with the spatial decoder.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        encoder_ckpt: PathBuf,
    },
    /// Unified stage 1 (projector), 2 (generation) or 3 (generation + VQA).
    TrainUnified {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Overrides `init_checkpoint` of the config.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
    },
    /// Generate the target view of a stored pair's reference image.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_dir: PathBuf,
        /// Camera-i → camera-j transform: axis-angle (3) then translation (3).
        #[arg(long, num_args = 6, allow_negative_numbers = true, value_names = ["RX", "RY", "RZ", "TX", "TY", "TZ"])]
        pose: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Question about the generated view, written to answer.txt.
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        conf_threshold: f64,
        /// Posterior-mean sampling without fresh noise.
        #[arg(long)]
        deterministic: bool,
    },
    /// Depth, reconstruction and generation metrics over a data directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Sampling seeds averaged per scene.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
    },
    /// Print a complete run config to start from.
    PrintConfig {
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
    },
}

fn load_config(path: &Path) -> Res<RunConfig> {
    RunConfig::from_json_file(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn train(mut cfg: RunConfig, stage: Stage, init: Option<PathBuf>) -> Res<()> {
    cfg.stage = stage;
    if init.is_some() {
        cfg.init_checkpoint = init;
    }
    let out = run_stage(&cfg)?;
    println!("checkpoint {}", out.checkpoint.display());
    println!("metrics {}", out.metrics.display());
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::GenData { seed, n, out, config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let data = write_dataset(&out, seed, n, &cfg.dataset.scene, &cfg.dataset.question_kinds)?;
            println!("{} pairs, {} questions in {}", data.pairs.len(), data.qa.len(), out.display());
        }
        Command::PretrainEncoder { config } => train(load_config(&config)?, Stage::EncoderPretrain, None)?,
        Command::TrainVae { config, encoder_ckpt } => train(load_config(&config)?, Stage::Vae, Some(encoder_ckpt))?,
        Command::TrainUnified { config, stage, init_ckpt } => train(load_config(&config)?, Stage::unified(stage)?, init_ckpt)?,
        Command::Generate { ckpt, scene_dir, pose, out, seed, question, conf_threshold, deterministic } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = Model::<f32>::new(&ck.config.model)?;
            let pair = load_pair(&scene_dir)?;
            let rel = Pose::from_axis_angle(Vec3::new(pose[0], pose[1], pose[2]), Vec3::new(pose[3], pose[4], pose[5]));
            let mode = if deterministic { SampleMode::Deterministic } else { SampleMode::Ancestral };
            let gen = generate_scene(&model, &ck.params, &pair.image_i, &rel, &pair.intrinsics, seed, mode)?;
            let (r, g) = write_generation(&gen, &pair.image_i, &out, conf_threshold)?;
            println!("{}\n{}", r.display(), g.display());
            if let Some(q) = question {
                let ids = Vocab::standard().encode(&q)?;
                let answer = describe_scene(&model, &ck.params, &gen.z_gen, &ids)?;
                println!("{}", write_answer(&out, &answer)?.display());
            }
        }
        Command::Evaluate { ckpt, data_dir, report, seeds } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = Model::<f32>::new(&ck.config.model)?;
            let data = read_dataset(&data_dir, &[])?;
            let rep = evaluate(&model, &ck.params, &data.pairs, &seeds)?;
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&report, serde_json::to_string_pretty(&rep)? + "\n")?;
            println!("abs_rel {:.4} recon_chamfer {:.4}", rep.mean_abs_rel, rep.mean_recon_chamfer);
            if let (Some(g), Some(b)) = (rep.mean_gen_chamfer, rep.mean_baseline_chamfer) {
                println!("gen_chamfer {g:.4} baseline_chamfer {b:.4}");
            }
        }
        Command::PrintConfig { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Toy => RunConfig::toy(Stage::EncoderPretrain),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
