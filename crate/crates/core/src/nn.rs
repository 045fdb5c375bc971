//! Named-parameter store and the small set of layers every model is built from.
//!
//! Layers hold only their parameter names and sizes. Values live in a
//! [`ParamStore`] keyed `"module.layer.param"`, and a forward pass binds them
//! onto a [`Graph`] through a [`Ctx`], either as trainable leaves or as
//! constants depending on the active [`Trainable`] selection.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Whether any parameter name starts with `prefix`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Copies every parameter of `other`, overwriting same-named entries.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (k, v) in other.iter() {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, v) in &self.params {
            if !v.all_finite() {
                return Err(Error::Numeric(format!("parameter {k} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// Stable 64-bit digest of names, shapes and bit patterns of all
    /// parameters under `prefix`.
    pub fn digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            k.bytes().for_each(|b| eat(b as u64));
            v.shape().iter().for_each(|&d| eat(d as u64));
            v.data().iter().for_each(|x| eat(x.as_f64().to_bits()));
        }
        h
    }
}

/// Which parameters receive gradients during a pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(ps: &[S]) -> Self {
        Trainable::Prefixes(ps.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Forward-pass context: a graph plus lazily bound parameters.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a Graph<T>,
    params: &'a ParamStore<T>,
    trainable: Trainable,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, params: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Self { g, params, trainable, bound: RefCell::new(BTreeMap::new()) }
    }

    /// Inference-only context: every parameter is a constant.
    pub fn frozen(g: &'a Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self::new(g, params, Trainable::Nothing)
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Binds (once per context) and returns the parameter `name`.
    ///
    /// Panics when the parameter is missing; model constructors verify
    /// presence up front via [`Ctx::require_prefix`].
    pub fn p(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).clone();
        let v = if self.trainable.includes(name) { self.g.param(t) } else { self.g.constant(t) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Uses an existing graph node as parameter `name` for this pass.
    pub fn bind(&self, name: &str, v: Var) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    pub fn require_prefix(&self, prefix: &str) -> Result<()> {
        if self.params.has_prefix(prefix) {
            Ok(())
        } else {
            Err(Error::Config(format!("no parameters under '{prefix}' in the loaded store")))
        }
    }

    /// Trainable parameters that took part in this pass.
    pub fn bound_trainable(&self) -> Vec<(String, Var)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.trainable.includes(k))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Gradients of the trainable parameters bound in this pass.
    pub fn collect_grads(&self, mut grads: Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in self.bound_trainable() {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
            out.insert(name, g);
        }
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn weight(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let std = 1.0 / (self.din as f64).sqrt();
        store.insert(self.weight(), Tensor::randn(vec![self.din, self.dout], std, rng));
        store.insert(self.bias(), Tensor::zeros(vec![self.dout]));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight(), Tensor::zeros(vec![self.din, self.dout]));
        store.insert(self.bias(), Tensor::zeros(vec![self.dout]));
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let y = cx.g.matmul(x, cx.p(&self.weight()));
        cx.g.add_bcast(y, cx.p(&self.bias()))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "gain"), Tensor::ones(vec![self.dim]));
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.dim]));
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let n = cx.g.layer_norm(x, Self::EPS);
        let s = cx.g.mul_bcast(n, cx.p(&join(&self.name, "gain")));
        cx.g.add_bcast(s, cx.p(&join(&self.name, "bias")))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self { fc1: Linear::new(join(name, "fc1"), din, hidden), fc2: Linear::new(join(name, "fc2"), hidden, dout) }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let h = self.fc1.forward(cx, x);
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }
}

/// Multi-head attention over `[B, N, D]` queries and `[B, M, D]` keys/values.
#[derive(Clone, Debug)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            dim,
            heads,
            q: Linear::new(join(name, "q"), dim, dim),
            k: Linear::new(join(name, "k"), dim, dim),
            v: Linear::new(join(name, "v"), dim, dim),
            o: Linear::new(join(name, "o"), dim, dim),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
    }

    fn split_heads<T: Scalar>(&self, g: &Graph<T>, x: Var, b: usize, n: usize) -> Var {
        let dh = self.dim / self.heads;
        if self.heads == 1 {
            return x;
        }
        let x = g.reshape(x, vec![b, n, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, vec![b * self.heads, n, dh])
    }

    fn merge_heads<T: Scalar>(&self, g: &Graph<T>, x: Var, b: usize, n: usize) -> Var {
        let dh = self.dim / self.heads;
        if self.heads == 1 {
            return x;
        }
        let x = g.reshape(x, vec![b, self.heads, n, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, vec![b, n, self.dim])
    }

    /// `mask`, when given, is an additive `[N, M]` bias on the attention logits.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var, context: Var, mask: Option<Var>) -> Var {
        let g = cx.g;
        let xs = g.shape(x);
        let cs = g.shape(context);
        let (b, n, m) = (xs[0], xs[1], cs[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(g, self.q.forward(cx, x), b, n);
        let k = self.split_heads(g, self.k.forward(cx, context), b, m);
        let v = self.split_heads(g, self.v.forward(cx, context), b, m);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = match mask {
            Some(mk) => g.add_bcast(scores, mk),
            None => scores,
        };
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false);
        let out = self.merge_heads(g, out, b, n);
        self.o.forward(cx, out)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_ratio: usize, cross: bool) -> Self {
        Self {
            ln1: LayerNorm::new(join(name, "ln1"), dim),
            attn: Attention::new(&join(name, "attn"), dim, heads),
            cross: cross.then(|| {
                (LayerNorm::new(join(name, "ln_cross"), dim), Attention::new(&join(name, "cross"), dim, heads))
            }),
            ln2: LayerNorm::new(join(name, "ln2"), dim),
            mlp: Mlp::new(&join(name, "mlp"), dim, dim * mlp_ratio, dim),
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        if let Some((ln, a)) = &self.cross {
            ln.init(store);
            a.init(store, rng);
        }
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var, context: Option<Var>, mask: Option<Var>) -> Var {
        let g = cx.g;
        let h = self.ln1.forward(cx, x);
        let a = self.attn.forward(cx, h, h, mask);
        let mut x = g.add(x, a);
        if let Some((ln, attn)) = &self.cross {
            let ctx = context.expect("cross-attention block needs a context");
            let h = ln.forward(cx, x);
            let a = attn.forward(cx, h, ctx, None);
            x = g.add(x, a);
        }
        let h = self.ln2.forward(cx, x);
        let m = self.mlp.forward(cx, h);
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let std = 1.0 / (fan_in as f64).sqrt();
        store.insert(join(&self.name, "weight"), Tensor::randn(vec![self.cout, self.cin, self.kernel, self.kernel], std, rng));
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.cout]));
    }

    pub fn init_zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "weight"), Tensor::zeros(vec![self.cout, self.cin, self.kernel, self.kernel]));
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.cout]));
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let g = cx.g;
        let y = g.conv2d(x, cx.p(&join(&self.name, "weight")), self.stride, self.pad);
        let b = g.reshape(cx.p(&join(&self.name, "bias")), vec![self.cout, 1, 1]);
        g.add_bcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_in = self.cin * self.kernel * self.kernel / (self.stride * self.stride).max(1);
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        store.insert(join(&self.name, "weight"), Tensor::randn(vec![self.cin, self.cout, self.kernel, self.kernel], std, rng));
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.cout]));
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let g = cx.g;
        let y = g.conv_transpose2d(x, cx.p(&join(&self.name, "weight")), self.stride, self.pad);
        let b = g.reshape(cx.p(&join(&self.name, "bias")), vec![self.cout, 1, 1]);
        g.add_bcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self { name: name.into(), vocab, dim }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(join(&self.name, "table"), Tensor::randn(vec![self.vocab, self.dim], 0.5, rng));
    }

    /// `[len, dim]` rows for the given ids.
    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, ids: &[usize]) -> Var {
        cx.g.index_select(cx.p(&join(&self.name, "table")), 0, ids)
    }
}

/// Sinusoidal embedding of integer positions/timesteps, `[len, dim]`.
pub fn sinusoidal<T: Scalar>(positions: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64).ln() * k / half.max(1) as f64).exp();
            let a = p as f64 * freq;
            data.push(T::lit(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(vec![positions.len(), dim], data)
}
