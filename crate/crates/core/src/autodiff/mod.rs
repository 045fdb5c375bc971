//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated eagerly; calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Grads`].
//! Nodes built only from constants carry no gradient and are skipped.

pub mod conv;

use std::cell::{Ref, RefCell};

use crate::scalar::Scalar;
use crate::tensor::{contiguous_strides, inverse_axes, numel, permute, Tensor};

use conv::{col2im, im2col, ConvGeom};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Silu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Recip,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMulW(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Unary(Var, Unary),
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    NormLast(Var),
    CosineRows { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Broadcast map: for every element of `a_shape`, the flat index into `b`.
fn bcast_map(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    assert!(b_shape.len() <= a_shape.len(), "broadcast {:?} onto {:?}", b_shape, a_shape);
    let off = a_shape.len() - b_shape.len();
    let b_strides = contiguous_strides(b_shape);
    let mut eff = vec![0usize; a_shape.len()];
    for (i, &d) in b_shape.iter().enumerate() {
        let ad = a_shape[off + i];
        assert!(d == ad || d == 1, "broadcast {:?} onto {:?}", b_shape, a_shape);
        eff[off + i] = if d == 1 { 0 } else { b_strides[i] };
    }
    let n = numel(a_shape);
    let mut out = Vec::with_capacity(n);
    let nd = a_shape.len();
    if nd == 0 {
        out.push(0);
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += eff[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            offset -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn is_suffix(a_shape: &[usize], b_shape: &[usize]) -> bool {
    b_shape.len() <= a_shape.len() && a_shape[a_shape.len() - b_shape.len()..] == *b_shape
}

/// `[outer, dim, inner]` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Gelu => gelu(x).0,
        Unary::Relu => x.max(T::zero()),
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Recip => T::one() / x,
    }
}

/// Derivative given input `x` and output `y`.
fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Gelu => gelu(x).1,
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => T::lit(2.0) * x,
        Unary::Sqrt => {
            if y > T::zero() {
                T::lit(0.5) / y
            } else {
                T::zero()
            }
        }
        Unary::Recip => -y * y,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "elementwise op shape mismatch");
            x.zip_map(y, f)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn bcast_apply(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        let mut out = x.clone();
        if is_suffix(x.shape(), y.shape()) {
            let m = y.numel().max(1);
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = f(*v, y.data()[i % m]);
            }
        } else {
            let map = bcast_map(x.shape(), y.shape());
            for (v, &j) in out.data_mut().iter_mut().zip(&map) {
                *v = f(*v, y.data()[j]);
            }
        }
        out
    }

    /// `a + b` with `b` broadcast (numpy rules, right aligned) to `a`'s shape.
    pub fn add_bcast(&self, a: Var, b: Var) -> Var {
        let out = self.bcast_apply(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::AddBcast(a, b), rg)
    }

    pub fn mul_bcast(&self, a: Var, b: Var) -> Var {
        let out = self.bcast_apply(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MulBcast(a, b), rg)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `x[..., k] · w[k, m]`.
    pub fn matmul(&self, x: Var, w: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            assert_eq!(wv.ndim(), 2, "matmul weight must be 2-D");
            let (k, m) = (wv.shape()[0], wv.shape()[1]);
            assert_eq!(xv.last_dim(), k, "matmul inner dim {:?} x {:?}", xv.shape(), wv.shape());
            let rows = xv.rows();
            let mut data = vec![T::zero(); rows * m];
            T::gemm(rows, k, m, xv.data(), false, wv.data(), false, &mut data, false);
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = m;
            Tensor::from_vec(shape, data)
        };
        let rg = self.rg(&[x, w]);
        self.push(out, Op::MatMulW(x, w), rg)
    }

    /// Batched `a[B,n,k] · b[B,k,m]`, or `a · bᵀ` with `b[B,m,k]` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.ndim(), 3, "bmm lhs must be 3-D");
            assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-D");
            let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            assert_eq!(bv.shape()[0], bs, "bmm batch mismatch");
            let (kb, m) = if trans_b { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
            assert_eq!(kb, k, "bmm inner dim {:?} x {:?}", av.shape(), bv.shape());
            let mut data = vec![T::zero(); bs * n * m];
            for i in 0..bs {
                T::gemm(
                    n,
                    k,
                    m,
                    &av.data()[i * n * k..(i + 1) * n * k],
                    false,
                    &bv.data()[i * k * m..(i + 1) * k * m],
                    trans_b,
                    &mut data[i * n * m..(i + 1) * n * m],
                    false,
                );
            }
            Tensor::from_vec(vec![bs, n, m], data)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn unary(&self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| unary_fwd(kind, v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn softmax(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let lse = mx + s.ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let (out, xhat, rstd) = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let mut out = xv.clone();
            let mut rstd = Vec::with_capacity(xv.rows());
            let eps = T::lit(eps);
            let dn = T::lit(d as f64);
            for row in out.data_mut().chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let r = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rstd.push(r);
            }
            let xhat = out.data().to_vec();
            (out, xhat, rstd)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    /// Scales every last-dimension vector to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var, eps: f64) -> Var {
        let (out, norms) = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let mut out = xv.clone();
            let mut norms = Vec::with_capacity(xv.rows());
            let eps = T::lit(eps);
            for row in out.data_mut().chunks_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
            (out, norms)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Euclidean norm over the last dimension: `[..., d] -> [...]`.
    pub fn norm_last(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let data: Vec<T> = xv.data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
            Tensor::from_vec(xv.shape()[..xv.ndim() - 1].to_vec(), data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::NormLast(x), rg)
    }

    /// Row-wise cosine similarity `[..., d] x [..., d] -> [...]`.
    /// Rows where either vector has zero norm yield 0.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.shape(), bv.shape(), "cosine_rows shape mismatch");
            let d = av.last_dim();
            let data: Vec<T> = av
                .data()
                .chunks(d)
                .zip(bv.data().chunks(d))
                .map(|(x, y)| cosine(x, y).0)
                .collect();
            Tensor::from_vec(av.shape()[..av.ndim() - 1].to_vec(), data)
        };
        let rg = self.rg(&[a, b]);
        self.push(out, Op::CosineRows { a, b }, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn sum_last(&self, x: Var) -> Var {
        let out = {
            let xv = self.value(x);
            let d = xv.last_dim();
            let data: Vec<T> = xv.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
            Tensor::from_vec(xv.shape()[..xv.ndim() - 1].to_vec(), data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::SumLast(x), rg)
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let out = permute(&self.value(x), axes);
        let rg = self.rg(&[x]);
        self.push(out, Op::Permute(x, axes.to_vec()), rg)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].0].value.shape().to_vec();
            let (outer, _, inner) = split_axis(&first, axis);
            let mut total = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                    if i != axis {
                        assert_eq!(a, b, "concat shape mismatch {:?} vs {:?}", s, first);
                    }
                }
                total += s[axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let d = t.shape()[axis];
                    data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::from_vec(shape, data)
        };
        let rg = self.rg(xs);
        self.push(out, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let (outer, d, inner) = split_axis(xv.shape(), axis);
            assert!(start + len <= d, "narrow out of range");
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * d * inner + start * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::from_vec(shape, data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Narrow { x, axis, start }, rg)
    }

    /// Gathers the listed positions along `axis` (repeats allowed).
    pub fn index_select(&self, x: Var, axis: usize, idx: &[usize]) -> Var {
        let out = {
            let xv = self.value(x);
            let (outer, d, inner) = split_axis(xv.shape(), axis);
            let mut data = Vec::with_capacity(outer * idx.len() * inner);
            for o in 0..outer {
                for &i in idx {
                    assert!(i < d, "index_select index {} out of range {}", i, d);
                    let base = (o * d + i) * inner;
                    data.extend_from_slice(&xv.data()[base..base + inner]);
                }
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = idx.len();
            Tensor::from_vec(shape, data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::IndexSelect { x, axis, idx: idx.to_vec() }, rg)
    }

    /// Picks one entry per row of `x[R, V]`: `out[r] = x[r, idx[r]]`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Var {
        let out = {
            let xv = self.value(x);
            let v = xv.last_dim();
            assert_eq!(xv.rows(), idx.len(), "pick needs one index per row");
            let data: Vec<T> = idx
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    assert!(i < v, "pick index {} out of range {}", i, v);
                    xv.data()[r * v + i]
                })
                .collect();
            Tensor::from_vec(vec![idx.len()], data)
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    /// 2-D convolution, `x[B,C,H,W]`, `w[O,C,k,k]` -> `[B,O,Ho,Wo]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (b, c, h, wd) = dims4(xv.shape());
            let (o, ci, k, k2) = dims4(wv.shape());
            assert_eq!(ci, c, "conv2d channel mismatch");
            assert_eq!(k, k2, "square kernels only");
            let g = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
            let (ho, wo) = (g.out_height(), g.out_width());
            let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
            let mut data = vec![T::zero(); b * o * ho * wo];
            for bi in 0..b {
                im2col(&xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd], &g, &mut cols);
                T::gemm(
                    o,
                    g.col_rows(),
                    ho * wo,
                    wv.data(),
                    false,
                    &cols,
                    false,
                    &mut data[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                    false,
                );
            }
            Tensor::from_vec(vec![b, o, ho, wo], data)
        };
        let rg = self.rg(&[x, w]);
        self.push(out, Op::Conv2d { x, w, stride, pad }, rg)
    }

    /// Transposed convolution, `x[B,C,H,W]`, `w[C,O,k,k]` ->
    /// `[B,O,(H-1)s-2p+k,(W-1)s-2p+k]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (b, c, h, wd) = dims4(xv.shape());
            let (ci, o, k, _) = dims4(wv.shape());
            assert_eq!(ci, c, "conv_transpose2d channel mismatch");
            let ho = (h - 1) * stride + k - 2 * pad;
            let wo = (wd - 1) * stride + k - 2 * pad;
            let g = ConvGeom { channels: o, height: ho, width: wo, kernel: k, stride, pad };
            assert_eq!((g.out_height(), g.out_width()), (h, wd), "inconsistent transposed conv geometry");
            let mut cols = vec![T::zero(); g.col_rows() * h * wd];
            let mut data = vec![T::zero(); b * o * ho * wo];
            for bi in 0..b {
                // cols[O·k·k, H·W] = W_rᵀ · x_b
                T::gemm(
                    g.col_rows(),
                    c,
                    h * wd,
                    wv.data(),
                    true,
                    &xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                    false,
                    &mut cols,
                    false,
                );
                col2im(&cols, &g, &mut data[bi * o * ho * wo..(bi + 1) * o * ho * wo]);
            }
            Tensor::from_vec(vec![b, o, ho, wo], data)
        };
        let rg = self.rg(&[x, w]);
        self.push(out, Op::ConvT2d { x, w, stride, pad }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// Cosine similarity and the two norms; 0 when either norm vanishes.
fn cosine<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ny = y.iter().map(|&b| b * b).sum::<T>().sqrt();
    if nx == T::zero() || ny == T::zero() {
        (T::zero(), nx, ny)
    } else {
        (dot / (nx * ny), nx, ny)
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[v.0].value.shape(), "gradient shape mismatch");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn reduce_bcast<T: Scalar>(g: &Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(b_shape.to_vec());
    if is_suffix(g.shape(), b_shape) {
        let m = out.numel().max(1);
        let od = out.data_mut();
        for (i, &v) in g.data().iter().enumerate() {
            od[i % m] += v;
        }
    } else {
        let map = bcast_map(g.shape(), b_shape);
        let od = out.data_mut();
        for (&v, &j) in g.data().iter().zip(&map) {
            od[j] += v;
        }
    }
    out
}

fn bcast_values<T: Scalar>(a_shape: &[usize], b: &Tensor<T>) -> Vec<T> {
    if is_suffix(a_shape, b.shape()) {
        let m = b.numel().max(1);
        (0..numel(a_shape)).map(|i| b.data()[i % m]).collect()
    } else {
        bcast_map(a_shape, b.shape()).into_iter().map(|j| b.data()[j]).collect()
    }
}

#[allow(clippy::too_many_lines)]
fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if rg(*a) {
                accumulate(nodes, grads, *a, g.zip_map(bv, |x, y| x / y));
            }
            if rg(*b) {
                let av = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((&gg, &x), &y)| -gg * x / (y * y))
                    .collect();
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape().to_vec(), data));
            }
        }
        Op::AddBcast(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if rg(*b) {
                accumulate(nodes, grads, *b, reduce_bcast(g, val(*b).shape()));
            }
        }
        Op::MulBcast(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let bb = bcast_values(av.shape(), bv);
                let data = g.data().iter().zip(&bb).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, Tensor::from_vec(av.shape().to_vec(), data));
            }
            if rg(*b) {
                let prod = g.zip_map(av, |x, y| x * y);
                accumulate(nodes, grads, *b, reduce_bcast(&prod, bv.shape()));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.map(|x| x * c));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MatMulW(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, m) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.rows();
            if rg(*x) {
                let mut dx = vec![T::zero(); rows * k];
                T::gemm(rows, m, k, g.data(), false, wv.data(), true, &mut dx, false);
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx));
            }
            if rg(*w) {
                let mut dw = vec![T::zero(); k * m];
                T::gemm(k, rows, m, xv.data(), true, g.data(), false, &mut dw, false);
                accumulate(nodes, grads, *w, Tensor::from_vec(vec![k, m], dw));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let m = g.shape()[2];
            if rg(*a) {
                let mut da = vec![T::zero(); bs * n * k];
                for i in 0..bs {
                    let gi = &g.data()[i * n * m..(i + 1) * n * m];
                    let bi = &bv.data()[i * k * m..(i + 1) * k * m];
                    // da = g · bᵀ  (b stored [k,m])  or  g · b  (b stored [m,k])
                    T::gemm(n, m, k, gi, false, bi, !*trans_b, &mut da[i * n * k..(i + 1) * n * k], false);
                }
                accumulate(nodes, grads, *a, Tensor::from_vec(av.shape().to_vec(), da));
            }
            if rg(*b) {
                let mut db = vec![T::zero(); bs * k * m];
                for i in 0..bs {
                    let gi = &g.data()[i * n * m..(i + 1) * n * m];
                    let ai = &av.data()[i * n * k..(i + 1) * n * k];
                    let out = &mut db[i * k * m..(i + 1) * k * m];
                    if *trans_b {
                        // db[m,k] = gᵀ · a
                        T::gemm(m, n, k, gi, true, ai, false, out, false);
                    } else {
                        // db[k,m] = aᵀ · g
                        T::gemm(k, n, m, ai, true, gi, false, out, false);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape().to_vec(), db));
            }
        }
        Op::Unary(x, kind) => {
            let xv = val(*x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(node.value.data())
                .map(|((&gg, &xi), &yi)| gg * unary_grad(*kind, xi, yi))
                .collect();
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), data));
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gg, &xi)| if xi >= *lo && xi <= *hi { gg } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), data));
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = y.last_dim();
            let mut dx = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(y.shape().to_vec(), dx));
        }
        Op::LogSoftmax(x) => {
            let y = &node.value;
            let d = y.last_dim();
            let mut dx = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let gs: T = gr.iter().copied().sum();
                dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * gs));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(y.shape().to_vec(), dx));
        }
        Op::LayerNorm { x, xhat, rstd } => {
            let d = node.value.last_dim();
            let dn = T::lit(d as f64);
            let mut dx = Vec::with_capacity(xhat.len());
            for ((xr, gr), &r) in xhat.chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                let mg = gr.iter().copied().sum::<T>() / dn;
                let mgx = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                dx.extend(xr.iter().zip(gr).map(|(&xh, &gi)| r * (gi - mg - xh * mgx)));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(node.value.shape().to_vec(), dx));
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let d = y.last_dim();
            let mut dx = Vec::with_capacity(y.numel());
            for ((yr, gr), &n) in y.data().chunks(d).zip(g.data().chunks(d)).zip(norms) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / n));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(y.shape().to_vec(), dx));
        }
        Op::NormLast(x) => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut dx = Vec::with_capacity(xv.numel());
            for ((xr, &gi), &n) in xv.data().chunks(d).zip(g.data()).zip(node.value.data()) {
                if n > T::zero() {
                    dx.extend(xr.iter().map(|&v| gi * v / n));
                } else {
                    dx.extend(std::iter::repeat_n(T::zero(), d));
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx));
        }
        Op::CosineRows { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.last_dim();
            let mut da = Vec::with_capacity(av.numel());
            let mut db = Vec::with_capacity(bv.numel());
            for ((xr, yr), &gi) in av.data().chunks(d).zip(bv.data().chunks(d)).zip(g.data()) {
                let (c, nx, ny) = cosine(xr, yr);
                if nx == T::zero() || ny == T::zero() {
                    da.extend(std::iter::repeat_n(T::zero(), d));
                    db.extend(std::iter::repeat_n(T::zero(), d));
                    continue;
                }
                let inv = T::one() / (nx * ny);
                da.extend(xr.iter().zip(yr).map(|(&x, &y)| gi * (y * inv - c * x / (nx * nx))));
                db.extend(xr.iter().zip(yr).map(|(&x, &y)| gi * (x * inv - c * y / (ny * ny))));
            }
            if rg(*a) {
                accumulate(nodes, grads, *a, Tensor::from_vec(av.shape().to_vec(), da));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape().to_vec(), db));
            }
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(xv.shape().to_vec(), g.item()));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let v = g.item() / T::lit(xv.numel() as f64);
            accumulate(nodes, grads, *x, Tensor::full(xv.shape().to_vec(), v));
        }
        Op::SumLast(x) => {
            let xv = val(*x);
            let d = xv.last_dim();
            let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, d)).collect();
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), data));
        }
        Op::Reshape(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, g.clone().reshape(xv.shape().to_vec()));
        }
        Op::Permute(x, axes) => {
            accumulate(nodes, grads, *x, permute(g, &inverse_axes(axes)));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for v in xs {
                let s = val(*v).shape().to_vec();
                let d = s[*axis];
                if rg(*v) {
                    let mut data = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + d * inner]);
                    }
                    accumulate(nodes, grads, *v, Tensor::from_vec(s, data));
                }
                offset += d;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, d, inner) = split_axis(xv.shape(), *axis);
            let len = g.shape()[*axis];
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let dd = dx.data_mut();
            for o in 0..outer {
                let dst = o * d * inner + start * inner;
                let src = o * len * inner;
                dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::IndexSelect { x, axis, idx } => {
            let xv = val(*x);
            let (outer, d, inner) = split_axis(xv.shape(), *axis);
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let dd = dx.data_mut();
            let n = idx.len();
            for o in 0..outer {
                for (j, &i) in idx.iter().enumerate() {
                    let dst = (o * d + i) * inner;
                    let src = (o * n + j) * inner;
                    for t in 0..inner {
                        dd[dst + t] += g.data()[src + t];
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Pick { x, idx } => {
            let xv = val(*x);
            let v = xv.last_dim();
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            let dd = dx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                dd[r * v + i] += g.data()[r];
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, c, h, wd) = dims4(xv.shape());
            let (o, _, k, _) = dims4(wv.shape());
            let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride: *stride, pad: *pad };
            let ncol = geom.col_cols();
            let nrow = geom.col_rows();
            let mut cols = vec![T::zero(); nrow * ncol];
            let mut dcols = vec![T::zero(); nrow * ncol];
            let mut dw = vec![T::zero(); wv.numel()];
            let mut dx = vec![T::zero(); xv.numel()];
            for bi in 0..b {
                let gb = &g.data()[bi * o * ncol..(bi + 1) * o * ncol];
                if rg(*w) {
                    im2col(&xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd], &geom, &mut cols);
                    T::gemm(o, ncol, nrow, gb, false, &cols, true, &mut dw, true);
                }
                if rg(*x) {
                    T::gemm(nrow, o, ncol, wv.data(), true, gb, false, &mut dcols, false);
                    col2im(&dcols, &geom, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                }
            }
            if rg(*x) {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx));
            }
            if rg(*w) {
                accumulate(nodes, grads, *w, Tensor::from_vec(wv.shape().to_vec(), dw));
            }
        }
        Op::ConvT2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, c, h, wd) = dims4(xv.shape());
            let (_, o, k, _) = dims4(wv.shape());
            let (ho, wo) = (g.shape()[2], g.shape()[3]);
            let geom = ConvGeom { channels: o, height: ho, width: wo, kernel: k, stride: *stride, pad: *pad };
            let nrow = geom.col_rows();
            let ncol = h * wd;
            let mut cols = vec![T::zero(); nrow * ncol];
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dw = vec![T::zero(); wv.numel()];
            for bi in 0..b {
                im2col(&g.data()[bi * o * ho * wo..(bi + 1) * o * ho * wo], &geom, &mut cols);
                let xb = &xv.data()[bi * c * ncol..(bi + 1) * c * ncol];
                if rg(*x) {
                    // dx_b[C, HW] = W_r[C, Okk] · cols
                    T::gemm(c, nrow, ncol, wv.data(), false, &cols, false, &mut dx[bi * c * ncol..(bi + 1) * c * ncol], false);
                }
                if rg(*w) {
                    // dW_r[C, Okk] += x_b · colsᵀ
                    T::gemm(c, ncol, nrow, xb, false, &cols, true, &mut dw, true);
                }
            }
            if rg(*x) {
                accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx));
            }
            if rg(*w) {
                accumulate(nodes, grads, *w, Tensor::from_vec(wv.shape().to_vec(), dw));
            }
        }
    }
}
