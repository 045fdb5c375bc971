//! Training data: scene pairs and templated questions, from a `gen-data`
//! directory or generated in memory.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::DatasetConfig;
use crate::conditioner::{make_qa, read_qa_jsonl, write_qa_jsonl, QaExample, QuestionKind, Vocab};
use crate::error::{invalid, Result};
use crate::geometry::io::{load_pair, save_pair};
use crate::geometry::{generate_scene_pair, SceneConfig, ScenePair};

pub const THREADS_ENV: &str = "UNIUGG_MINI_THREADS";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<ScenePair>,
    /// `(pair index, example)`.
    pub qa: Vec<(usize, QaExample)>,
}

pub fn pair_dir_name(k: usize) -> String {
    format!("pair_{k:04}")
}

/// Pairs with seeds `first_seed..first_seed + n`, generated in parallel on
/// at most `UNIUGG_MINI_THREADS` threads. The result does not depend on
/// the thread count.
pub fn generate_pairs(first_seed: u64, n: usize, scene: &SceneConfig) -> Result<Vec<ScenePair>> {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(|k| generate_scene_pair(first_seed + k as u64, scene)).collect())
}

pub fn questions_for(pairs: &[ScenePair], kinds: &[QuestionKind]) -> Result<Vec<(usize, QaExample)>> {
    let vocab = Vocab::standard();
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        for &k in kinds {
            out.push((i, make_qa(p, k, &vocab)?));
        }
    }
    Ok(out)
}

/// Writes `pair_XXXX/` directories, `qa.jsonl` and `vocab.json` under `out`.
pub fn write_dataset(out: &Path, first_seed: u64, n: usize, scene: &SceneConfig, kinds: &[QuestionKind]) -> Result<Dataset> {
    let pairs = generate_pairs(first_seed, n, scene)?;
    fs::create_dir_all(out)?;
    for (k, p) in pairs.iter().enumerate() {
        save_pair(p, &out.join(pair_dir_name(k)))?;
    }
    let qa = questions_for(&pairs, kinds)?;
    write_qa_jsonl(&out.join("qa.jsonl"), &qa.iter().map(|(_, q)| q.clone()).collect::<Vec<_>>())?;
    Vocab::standard().save(&out.join("vocab.json"))?;
    Ok(Dataset { pairs, qa })
}

pub fn read_dataset(dir: &Path, kinds: &[QuestionKind]) -> Result<Dataset> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("pair_"))
        .collect();
    names.sort();
    if names.is_empty() {
        return invalid(format!("no pair_* directories in {}", dir.display()));
    }
    let pairs = names.iter().map(|n| load_pair(&dir.join(n))).collect::<Result<Vec<_>>>()?;
    let qa_path = dir.join("qa.jsonl");
    let qa = if qa_path.exists() {
        read_qa_jsonl(&qa_path)?
            .into_iter()
            .map(|q| match pairs.iter().position(|p| p.seed == q.seed) {
                Some(i) => Ok((i, q)),
                None => invalid(format!("question for unknown scene seed {}", q.seed)),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        questions_for(&pairs, kinds)?
    };
    Ok(Dataset { pairs, qa })
}

impl Dataset {
    pub fn from_config(cfg: &DatasetConfig) -> Result<Self> {
        match &cfg.dir {
            Some(dir) => read_dataset(dir, &cfg.question_kinds),
            None => {
                let pairs = generate_pairs(cfg.first_seed, cfg.n_pairs, &cfg.scene)?;
                let qa = questions_for(&pairs, &cfg.question_kinds)?;
                Ok(Self { pairs, qa })
            }
        }
    }
}

/// Indices of the pairs in the batch of `step`: consecutive, wrapping.
pub fn batch_indices(step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    (0..batch_size).map(|k| ((step as usize).wrapping_mul(batch_size) + k) % n).collect()
}
