//! Language-model stand-in: raymap queries, the fusion transformer that
//! produces conditioning features, and a prefix-LM VQA head over a toy
//! vocabulary.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{EncoderConfig, TokenGrid};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Raymap, ScenePair};
use crate::nn::{Block, Ctx, Embedding, LayerNorm, Linear, Mlp, ParamStore};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIX: &str = "cond";
pub const MODE_GENERATE: usize = 0;
pub const MODE_VQA: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionerConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    /// Question plus answer tokens per sequence.
    pub max_text_len: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self { dim: 128, depth: 2, heads: 4, mlp_ratio: 2, vocab: 64, max_text_len: 24 }
    }
}

/// Parameters named `cond.<part>`; the vision projector is `cond.vision_proj`.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub enc: EncoderConfig,
    pub cfg: ConditionerConfig,
    query: Mlp,
    vision_proj: Linear,
    embed: Embedding,
    blocks: Vec<Block>,
    norm: LayerNorm,
    lm_head: Linear,
}

pub const VISION_PROJ: &str = "cond.vision_proj";

impl Conditioner {
    pub fn new(enc: &EncoderConfig, cfg: &ConditionerConfig) -> Result<Self> {
        enc.validate()?;
        if cfg.depth == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return invalid(format!("bad conditioner config {cfg:?}"));
        }
        if cfg.vocab < Vocab::standard().len() {
            return invalid(format!("vocabulary of {} is smaller than the {} built-in words", cfg.vocab, Vocab::standard().len()));
        }
        let n = |s: &str| format!("{PREFIX}.{s}");
        Ok(Self {
            enc: enc.clone(),
            cfg: cfg.clone(),
            query: Mlp::new(&n("query"), 6, cfg.dim, cfg.dim),
            vision_proj: Linear::new(VISION_PROJ, enc.dim, cfg.dim),
            embed: Embedding::new(n("embed"), cfg.vocab, cfg.dim),
            blocks: (0..cfg.depth).map(|l| Block::new(&n(&format!("blocks.{l}")), cfg.dim, cfg.heads, cfg.mlp_ratio, false)).collect(),
            norm: LayerNorm::new(n("norm"), cfg.dim),
            lm_head: Linear::new(n("lm_head"), cfg.dim, cfg.vocab),
        })
    }

    pub fn num_queries(&self) -> usize {
        self.enc.num_tokens()
    }

    pub fn pos_vision(&self) -> String {
        format!("{PREFIX}.pos_vision")
    }

    fn pos_query(&self) -> String {
        format!("{PREFIX}.pos_query")
    }

    fn pos_text(&self) -> String {
        format!("{PREFIX}.pos_text")
    }

    fn mode(&self) -> String {
        format!("{PREFIX}.mode")
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let (n, d) = (self.num_queries(), self.cfg.dim);
        self.query.init(store, rng);
        self.vision_proj.init(store, rng);
        self.embed.init(store, rng);
        store.insert(self.pos_vision(), Tensor::randn(vec![n, d], 0.1, rng));
        store.insert(self.pos_query(), Tensor::randn(vec![n, d], 0.1, rng));
        store.insert(self.pos_text(), Tensor::randn(vec![self.cfg.max_text_len, d], 0.1, rng));
        store.insert(self.mode(), Tensor::randn(vec![2, d], 0.1, rng));
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.norm.init(store);
        self.lm_head.init(store, rng);
    }

    /// Per-cell MLP on raymaps `[B, H_t, W_t, 6]` → queries `[B, N_q, d_c]`.
    pub fn queries<T: Scalar>(&self, cx: &Ctx<T>, raymaps: &Tensor<T>) -> Result<Var> {
        let s = raymaps.shape();
        let (ht, wt) = self.enc.grid();
        if s.len() != 4 || s[1..] != [ht, wt, 6] {
            return invalid(format!("raymaps must be [B, {ht}, {wt}, 6], got {s:?}"));
        }
        let x = cx.g.constant(raymaps.clone().reshape(vec![s[0], ht * wt, 6]));
        Ok(self.query.forward(cx, x))
    }

    /// Projected vision tokens with their position embedding, `[B, N, d_c]`.
    pub fn vision_tokens<T: Scalar>(&self, cx: &Ctx<T>, z: Var) -> Result<Var> {
        let s = cx.g.shape(z);
        if s.len() != 3 || s[1] != self.num_queries() || s[2] != self.enc.dim {
            return invalid(format!("vision tokens must be [B, {}, {}], got {s:?}", self.num_queries(), self.enc.dim));
        }
        Ok(cx.g.add_bcast(self.vision_proj.forward(cx, z), cx.p(&self.pos_vision())))
    }

    /// Projector output alone (no position embedding), `[B, N, d_c]`.
    pub fn project_vision<T: Scalar>(&self, cx: &Ctx<T>, z: Var) -> Var {
        self.vision_proj.forward(cx, z)
    }

    fn mode_token<T: Scalar>(&self, cx: &Ctx<T>, mode: usize, batch: usize) -> Var {
        let g = cx.g;
        let m = g.narrow(cx.p(&self.mode()), 0, mode, 1);
        let zeros = g.constant(Tensor::zeros(vec![batch, 1, self.cfg.dim]));
        g.add_bcast(zeros, m)
    }

    fn fuse<T: Scalar>(&self, cx: &Ctx<T>, seq: Var, mask: Option<Var>) -> Var {
        let mut h = seq;
        for b in &self.blocks {
            h = b.forward(cx, h, None, mask);
        }
        self.norm.forward(cx, h)
    }

    /// Conditioning features `[B, N_q, d_c]`: full attention over
    /// `[mode; Z_ref; q]`, read off at the query positions.
    pub fn condition<T: Scalar>(&self, cx: &Ctx<T>, z_ref: Var, q: Var) -> Result<Var> {
        cx.require_prefix(PREFIX)?;
        let g = cx.g;
        let v = self.vision_tokens(cx, z_ref)?;
        let b = g.shape(v)[0];
        let nq = self.num_queries();
        if g.shape(q) != [b, nq, self.cfg.dim] {
            return invalid(format!("queries {:?} do not match [{b}, {nq}, {}]", g.shape(q), self.cfg.dim));
        }
        let qp = g.add_bcast(q, cx.p(&self.pos_query()));
        let seq = g.concat(&[self.mode_token(cx, MODE_GENERATE, b), v, qp], 1);
        let h = self.fuse(cx, seq, None);
        Ok(g.narrow(h, 1, 1 + nq, nq))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
            return invalid(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab));
        }
        Ok(())
    }

    /// Next-token logits `[len(inputs), vocab]` for one example: the prefix
    /// `[mode; Z; question]` attends fully within itself, answer positions
    /// attend to the prefix and causally to earlier answer positions.
    pub fn answer_logits<T: Scalar>(&self, cx: &Ctx<T>, z: Var, question: &[usize], inputs: &[usize]) -> Result<Var> {
        cx.require_prefix(PREFIX)?;
        let g = cx.g;
        if question.is_empty() {
            return invalid("empty question");
        }
        self.check_ids(question)?;
        self.check_ids(inputs)?;
        let text_len = question.len() + inputs.len();
        if text_len > self.cfg.max_text_len {
            return invalid(format!("{text_len} text tokens exceed max_text_len {}", self.cfg.max_text_len));
        }
        let v = self.vision_tokens(cx, z)?;
        if g.shape(v)[0] != 1 {
            return invalid("answer_logits takes a single token grid");
        }
        let ids: Vec<usize> = question.iter().chain(inputs).copied().collect();
        let text = g.add(self.embed.forward(cx, &ids), g.narrow(cx.p(&self.pos_text()), 0, 0, text_len));
        let text = g.reshape(text, vec![1, text_len, self.cfg.dim]);
        let seq = g.concat(&[self.mode_token(cx, MODE_VQA, 1), v, text], 1);
        let total = 1 + self.num_queries() + text_len;
        let prefix = total - inputs.len();
        let mut mask = vec![T::zero(); total * total];
        for r in 0..total {
            for c in 0..total {
                let visible = if r < prefix { c < prefix } else { c <= r };
                if !visible {
                    mask[r * total + c] = T::lit(-1e9);
                }
            }
        }
        let mask = g.constant(Tensor::from_vec(vec![total, total], mask));
        let h = self.fuse(cx, seq, Some(mask));
        let h = g.reshape(g.narrow(h, 1, prefix, inputs.len()), vec![inputs.len(), self.cfg.dim]);
        Ok(self.lm_head.forward(cx, h))
    }
}

/// Teacher-forced cross-entropy: the mean over answer positions of
/// `−log p(a_t | Z, q, a_<t)`. `answer` should end with [`Vocab::END`].
pub fn vqa_loss<T: Scalar>(cx: &Ctx<T>, model: &Conditioner, z: Var, question: &[usize], answer: &[usize]) -> Result<Var> {
    if answer.is_empty() {
        return invalid("empty answer");
    }
    model.check_ids(answer)?;
    let inputs: Vec<usize> = std::iter::once(Vocab::BOS).chain(answer[..answer.len() - 1].iter().copied()).collect();
    let logits = model.answer_logits(cx, z, question, &inputs)?;
    token_nll(cx.g, logits, answer)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits[len, V]`.
pub fn token_nll<T: Scalar>(g: &Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != targets.len() {
        return invalid(format!("logits {s:?} for {} targets", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
        return invalid(format!("target id {bad} outside vocabulary of {}", s[1]));
    }
    let lp = g.log_softmax(logits);
    Ok(g.neg(g.mean(g.pick(lp, targets))))
}

/// Greedy decoding; stops at [`Vocab::END`] (not returned) or `max_len`.
pub fn vqa_generate<T: Scalar>(model: &Conditioner, params: &ParamStore<T>, z: &TokenGrid<T>, question: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let (ht, wt) = z.grid();
    let mut out = Vec::new();
    let mut inputs = vec![Vocab::BOS];
    if question.is_empty() {
        return invalid("empty question");
    }
    while out.len() < max_len {
        let g = Graph::new();
        let cx = Ctx::frozen(&g, params);
        let zv = g.constant(z.flat().reshape(vec![1, ht * wt, z.dim()]));
        let logits = model.answer_logits(&cx, zv, question, &inputs)?;
        let lv = g.value(logits);
        let v = lv.last_dim();
        let last = &lv.data()[(inputs.len() - 1) * v..inputs.len() * v];
        let mut best = 0;
        for (i, x) in last.iter().enumerate() {
            if *x > last[best] {
                best = i;
            }
        }
        if best == Vocab::END {
            break;
        }
        out.push(best);
        inputs.push(best);
    }
    Ok(out)
}

/// Fixed projection of teacher features into the conditioner width, the
/// stage-1 alignment target.
pub fn alignment_target<T: Scalar>(teacher: &Tensor<T>, dim: usize, seed: u64) -> Tensor<T> {
    let s = teacher.shape();
    let d_in = s[s.len() - 1];
    let w: Tensor<T> = Tensor::randn(vec![d_in, dim], 1.0 / (d_in as f64).sqrt(), &mut seeded(seed));
    let rows = teacher.numel() / d_in;
    let mut out = vec![T::zero(); rows * dim];
    T::gemm(rows, d_in, dim, teacher.data(), false, w.data(), false, &mut out, false);
    let mut shape = s.to_vec();
    *shape.last_mut().expect("nonempty shape") = dim;
    Tensor::from_vec(shape, out)
}

/// Raymaps of several pairs stacked as `[B, H_t, W_t, 6]`.
pub fn stack_raymaps<T: Scalar>(maps: &[Raymap]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = maps.iter().map(|m| Tensor::from_f64(vec![m.grid_h, m.grid_w, 6], &m.data)).collect();
    Tensor::stack(&items)
}

/// The toy word list. Ids are positions; ids past the list are unused.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<end>", "is", "the", "second", "view", "left", "or", "right", "of", "first", "?", "in", "front", "behind",
    "how", "many", "objects", "are", "visible", "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "what",
    "scene", "a", "room", "with", "box", "boxes", "and", "wall", "floor", "yes", "no", "closer", "farther", "than",
];

const NUMBERS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const END: usize = 2;

    pub fn standard() -> Self {
        Self { words: WORDS.iter().map(|w| w.to_string()).collect() }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words.iter().position(|w| w == word).ok_or_else(|| Error::Validation(format!("word '{word}' not in vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.words.get(i).map_or("<unk>", |s| s.as_str())).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.words)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    /// Side of view j's camera center relative to camera i.
    Direction,
    /// Whether view j's camera center is in front of or behind camera i.
    Depth,
    /// Number of primitives visible in view i.
    Count,
}

impl QuestionKind {
    pub fn text(self) -> &'static str {
        match self {
            Self::Direction => "is the second view left or right of the first ?",
            Self::Depth => "is the second view in front of or behind the first ?",
            Self::Count => "how many objects are visible ?",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub seed: u64,
    pub question_ids: Vec<usize>,
    /// Ground-truth answer followed by the end token.
    pub answer_ids: Vec<usize>,
}

impl QaExample {
    /// Answer without the end token.
    pub fn answer(&self) -> &[usize] {
        match self.answer_ids.last() {
            Some(&Vocab::END) => &self.answer_ids[..self.answer_ids.len() - 1],
            _ => &self.answer_ids,
        }
    }
}

/// Templated question with its answer read from the pair's ground truth.
pub fn make_qa(pair: &ScenePair, kind: QuestionKind, vocab: &Vocab) -> Result<QaExample> {
    let center_j = pair.relative().center();
    let word = match kind {
        QuestionKind::Direction => {
            if center_j.x >= 0.0 {
                "right"
            } else {
                "left"
            }
        }
        QuestionKind::Depth => {
            if center_j.z >= 0.0 {
                "front"
            } else {
                "behind"
            }
        }
        QuestionKind::Count => NUMBERS[pair.visible_primitives_i.min(9)],
    };
    Ok(QaExample { seed: pair.seed, question_ids: vocab.encode(kind.text())?, answer_ids: vec![vocab.id(word)?, Vocab::END] })
}

pub fn write_qa_jsonl(path: &Path, items: &[QaExample]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for it in items {
        writeln!(f, "{}", serde_json::to_string(it)?)?;
    }
    Ok(())
}

pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QaExample>> {
    fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
