//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are computed
//! eagerly, so data-dependent branches (degenerate projections, zero-norm
//! cosines) are resolved while the tape is being built. Calling
//! [`Graph::backward`] walks the tape once in reverse.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, Result};
use crate::nn::ParamId;
use crate::rng;
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Silu => x / (1.0 + libm::exp(-x)),
            Activation::Tanh => libm::tanh(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + libm::exp(-x));
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sqrt(Var),
    Act(Var, Activation),
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Upsample2x(Var),
    MeanSpatial(Var),
    Sum(Var),
    Mean(Var),
    SumAbs(Var),
    Dot(Var, Var),
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Evaluation mode for layers that behave differently while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

/// The tape.
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
    trainable: Vec<bool>,
    mode: Mode,
    dropout_rng: Option<ChaCha8Rng>,
}

impl core::fmt::Debug for Graph {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).field("mode", &self.mode).finish()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was tracked and reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound trainable parameter that the loss reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().filter_map(move |(&id, &v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}

fn same_len_or_scalar(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() == b.len() || a.len() == 1 || b.len() == 1 {
        Ok(())
    } else {
        Err(input_err!("elementwise shape mismatch {:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.len() >= b.len() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Reduce an upstream gradient onto a possibly broadcast operand.
fn reduce_to(operand: &Tensor, g: Vec<f64>) -> Tensor {
    if operand.len() == g.len() {
        Tensor::from_vec(operand.shape(), g).expect("gradient shape")
    } else {
        Tensor::from_vec(operand.shape(), vec![g.iter().sum()]).expect("scalar gradient")
    }
}

impl Graph {
    /// A graph in which every parameter is treated as a constant.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), bound: BTreeMap::new(), trainable: Vec::new(), mode: Mode::Eval, dropout_rng: None }
    }

    /// A graph that tracks gradients for parameters whose `trainable[id]` is set.
    pub fn new(trainable: Vec<bool>, mode: Mode, dropout_seed: u64) -> Self {
        let dropout_rng = match mode {
            Mode::Train => Some(rng::seeded(dropout_seed)),
            Mode::Eval => None,
        };
        Self { nodes: Vec::new(), bound: BTreeMap::new(), trainable, mode, dropout_rng }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is tracked when `track` is set.
    pub fn input(&mut self, value: Tensor, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    /// Bind a stored parameter. Repeated bindings share one node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let track = self.trainable.get(id.0).copied().unwrap_or(false);
        let v = self.push(value.clone(), Op::Param, track);
        self.bound.insert(id, v);
        v
    }

    /// Copy of `v` with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_len_or_scalar(ta, tb)?;
        let shape = broadcast_shape(ta, tb);
        let n = ta.len().max(tb.len());
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| c * x);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(libm::sqrt);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let value = self.nodes[a.0].value.map(|x| f.apply(x));
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Act(a, f), ng)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(input_err!("matmul shape mismatch {:?} · {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        tensor::gemm_acc(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::from_vec(&[m, n], out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Add a `[d]` bias to every row of `[n,d]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let d = tb.len();
        if ta.shape().last() != Some(&d) {
            return Err(input_err!("row bias {:?} does not fit {:?}", tb.shape(), ta.shape()));
        }
        let mut value = ta.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let ng = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    /// Add a `[C]` bias to every spatial position of `[C, ...]`.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = tb.len();
        if ta.shape().first() != Some(&c) {
            return Err(input_err!("channel bias {:?} does not fit {:?}", tb.shape(), ta.shape()));
        }
        let plane = ta.len() / c;
        let mut value = ta.clone();
        for (ch, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let b = tb.data()[ch];
            chunk.iter_mut().for_each(|x| *x += b);
        }
        let ng = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddChannel(a, bias), ng))
    }

    /// Convolution of `[Cin,H,W]` with weights `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(input_err!("conv2d shape mismatch x{:?} w{:?}", xs, ws));
        }
        let geom = ConvGeom { in_channels: xs[0], height: xs[1], width: xs[2], kernel: ws[2], stride, pad };
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(input_err!("conv2d kernel larger than padded input"));
        }
        let (ho, wo) = geom.out_hw();
        let cout = ws[0];
        let cols = tensor::im2col(tx.data(), &geom);
        let mut out = vec![0.0; cout * ho * wo];
        tensor::gemm_acc(cout, geom.col_rows(), ho * wo, tw.data(), &cols, &mut out);
        let value = Tensor::from_vec(&[cout, ho, wo], out)?;
        let ng = self.any_grad(&[x, w]);
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, ng))
    }

    /// Group normalisation over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let tx = &self.nodes[x.0].value;
        let c = tx.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(input_err!("{} channels not divisible into {} groups", c, groups));
        }
        let plane = tx.len() / c;
        let per = plane * (c / groups);
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; groups];
        for gi in 0..groups {
            let seg = &tx.data()[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / libm::sqrt(var + EPS);
            rstd[gi] = r;
            for (o, v) in xhat[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut out = vec![0.0; tx.len()];
        for ch in 0..c {
            let (gm, bt) = (tg.data()[ch], tb.data()[ch]);
            for i in ch * plane..(ch + 1) * plane {
                out[i] = gm * xhat[i] + bt;
            }
        }
        let value = Tensor::from_vec(tx.shape(), out)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, ng))
    }

    /// Layer normalisation of each row of `[n, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let tx = &self.nodes[x.0].value;
        let d = *tx.shape().last().ok_or_else(|| input_err!("layer_norm on a scalar"))?;
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let seg = &tx.data()[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / libm::sqrt(var + EPS);
            rstd[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(seg) {
                *o = (v - mean) * s;
            }
        }
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let out = xhat.iter().enumerate().map(|(i, v)| tg.data()[i % d] * v + tb.data()[i % d]).collect();
        let value = Tensor::from_vec(tx.shape(), out)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Row-wise softmax of `[n, m]`.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let m = *ta.shape().last().ok_or_else(|| input_err!("softmax on a scalar"))?;
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(ta.shape(), out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Mean cross-entropy of `[n, C]` logits against class indices.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let c = *tl.shape().last().ok_or_else(|| input_err!("cross entropy on a scalar"))?;
        let n = tl.len() / c;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(input_err!("cross entropy targets do not match logits {:?}", tl.shape()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[targets[r]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        let ng = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(input_err!("transpose expects 2-D, got {:?}", ta.shape()));
        }
        let value = ta.transpose2d();
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| input_err!("concat of nothing"))?;
        let tail: Vec<usize> = {
            let s = self.shape(*first);
            if s.is_empty() {
                Vec::new()
            } else {
                s[1..].to_vec()
            }
        };
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let s = t.shape();
            let (l, rest) = if s.is_empty() { (1, &[][..]) } else { (s[0], &s[1..]) };
            if rest != tail.as_slice() {
                return Err(input_err!("concat trailing dims {:?} vs {:?}", rest, tail));
            }
            lead += l;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::from_vec(&shape, data)?;
        let ng = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        if s.is_empty() || start + len > s[0] {
            return Err(input_err!("slice {}..{} out of {:?}", start, start + len, s));
        }
        let row = ta.len() / s[0];
        let mut shape = s.to_vec();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, ta.data()[start * row..(start + len) * row].to_vec())?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Slice { x: a, start }, ng))
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let s = ta.shape();
        if s.len() != 3 {
            return Err(input_err!("upsample expects [C,H,W], got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + x] = ta.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[c, 2 * h, 2 * w], out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::Upsample2x(a), ng))
    }

    /// Global average pool `[C, ...]` → `[C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let c = *ta.shape().first().ok_or_else(|| input_err!("pool on a scalar"))?;
        let plane = ta.len() / c;
        let out = ta.data().chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::from_vec(&[c], out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(value, Op::MeanSpatial(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    /// `Σ|aᵢ|`, the L1 norm.
    pub fn sum_abs(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.data().iter().map(|v| v.abs()).sum());
        let ng = self.any_grad(&[a]);
        self.push(value, Op::SumAbs(a), ng)
    }

    /// Inner product of two equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.len() != tb.len() {
            return Err(input_err!("dot of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let value = Tensor::scalar(tensor::dot(ta.data(), tb.data()));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Dot(a, b), ng))
    }

    /// Inverted dropout. Identity in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.nodes[a.0].value.len();
        let r = self.dropout_rng.as_mut().expect("train graphs carry a dropout rng");
        let mask: Vec<f64> = (0..n).map(|_| if rng::uniform(r) < keep { 1.0 / keep } else { 0.0 }).collect();
        let t = &self.nodes[a.0].value;
        let out = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::from_vec(t.shape(), out).expect("dropout shape");
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Dropout { x: a, mask }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(input_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.bound.clone() })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    acc(*a, reduce_to(val(*a), gd.to_vec()));
                }
                if wants(*b) {
                    acc(*b, reduce_to(val(*b), gd.iter().map(|x| sign * x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, reduce_to(ta, (0..gd.len()).map(|i| gd[i] * at(tb, i)).collect()));
                }
                if wants(*b) {
                    acc(*b, reduce_to(tb, (0..gd.len()).map(|i| gd[i] * at(ta, i)).collect()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, reduce_to(ta, (0..gd.len()).map(|i| gd[i] / at(tb, i)).collect()));
                }
                if wants(*b) {
                    let d = (0..gd.len())
                        .map(|i| {
                            let y = at(tb, i);
                            -gd[i] * at(ta, i) / (y * y)
                        })
                        .collect();
                    acc(*b, reduce_to(tb, d));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Sqrt(a) => {
                let out = node.value.data();
                let d = gd.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect();
                acc(*a, Tensor::from_vec(val(*a).shape(), d).expect("sqrt grad"));
            }
            Op::Act(a, f) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * f.derivative(x)).collect();
                acc(*a, Tensor::from_vec(val(*a).shape(), d).expect("act grad"));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm_a_bt_acc(m, n, k, gd, tb.data(), &mut da);
                    acc(*a, Tensor::from_vec(&[m, k], da).expect("matmul grad a"));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm_at_b_acc(k, m, n, ta.data(), gd, &mut db);
                    acc(*b, Tensor::from_vec(&[k, n], db).expect("matmul grad b"));
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*bias) {
                    let d = val(*bias).len();
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (o, x) in db.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    acc(*bias, Tensor::from_vec(val(*bias).shape(), db).expect("row bias grad"));
                }
            }
            Op::AddChannel(a, bias) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*bias) {
                    let c = val(*bias).len();
                    let plane = gd.len() / c;
                    let db = gd.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    acc(*bias, Tensor::from_vec(val(*bias).shape(), db).expect("channel bias grad"));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let tw = val(*w);
                let cout = tw.shape()[0];
                let (ho, wo) = geom.out_hw();
                let kdim = geom.col_rows();
                if wants(*w) {
                    let mut dw = vec![0.0; cout * kdim];
                    tensor::gemm_a_bt_acc(cout, ho * wo, kdim, gd, cols, &mut dw);
                    acc(*w, Tensor::from_vec(tw.shape(), dw).expect("conv grad w"));
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; kdim * ho * wo];
                    tensor::gemm_at_b_acc(kdim, cout, ho * wo, tw.data(), gd, &mut dcols);
                    let mut dx = vec![0.0; geom.in_channels * geom.height * geom.width];
                    tensor::col2im(&dcols, geom, &mut dx);
                    acc(*x, Tensor::from_vec(val(*x).shape(), dx).expect("conv grad x"));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let tg = val(*gamma);
                let c = tg.len();
                let plane = gd.len() / c;
                if wants(*gamma) {
                    let d = (0..c).map(|ch| (ch * plane..(ch + 1) * plane).map(|i| gd[i] * xhat[i]).sum()).collect();
                    acc(*gamma, Tensor::from_vec(tg.shape(), d).expect("gn gamma"));
                }
                if wants(*beta) {
                    let d = gd.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    acc(*beta, Tensor::from_vec(tg.shape(), d).expect("gn beta"));
                }
                if wants(*x) {
                    let per = plane * (c / groups);
                    let mut dx = vec![0.0; gd.len()];
                    for gi in 0..*groups {
                        let range = gi * per..(gi + 1) * per;
                        let dxhat: Vec<f64> = range.clone().map(|i| gd[i] * tg.data()[i / plane]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / per as f64;
                        let m2 = dxhat.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                        for (j, i) in range.enumerate() {
                            dx[i] = rstd[gi] * (dxhat[j] - m1 - xhat[i] * m2);
                        }
                    }
                    acc(*x, Tensor::from_vec(val(*x).shape(), dx).expect("gn x"));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let tg = val(*gamma);
                let d = tg.len();
                if wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (i, (g, xh)) in gd.iter().zip(xhat).enumerate() {
                        dg[i % d] += g * xh;
                    }
                    acc(*gamma, Tensor::from_vec(tg.shape(), dg).expect("ln gamma"));
                }
                if wants(*beta) {
                    let mut db = vec![0.0; d];
                    for (i, g) in gd.iter().enumerate() {
                        db[i % d] += g;
                    }
                    acc(*beta, Tensor::from_vec(tg.shape(), db).expect("ln beta"));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = range.clone().map(|i| gd[i] * tg.data()[i % d]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, i) in range.enumerate() {
                            dx[i] = s * (dxhat[j] - m1 - xhat[i] * m2);
                        }
                    }
                    acc(*x, Tensor::from_vec(val(*x).shape(), dx).expect("ln x"));
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let m = *node.value.shape().last().expect("softmax dims");
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(m).zip(gd.chunks(m)).zip(dx.chunks_mut(m)) {
                    let s = tensor::dot(yr, gr);
                    for j in 0..m {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, Tensor::from_vec(val(*a).shape(), dx).expect("softmax grad"));
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let c = *val(*logits).shape().last().expect("ce dims");
                let n = targets.len() as f64;
                let scale = gd[0] / n;
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::from_vec(val(*logits).shape(), dx).expect("ce grad"));
            }
            Op::Transpose(a) => acc(*a, g.transpose2d()),
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape()).expect("reshape grad")),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    if wants(p) {
                        let d = gd[offset..offset + t.len()].to_vec();
                        acc(p, Tensor::from_vec(t.shape(), d).expect("concat grad"));
                    }
                    offset += t.len();
                }
            }
            Op::Slice { x, start } => {
                let t = val(*x);
                let row = t.len() / t.shape()[0];
                let mut dx = vec![0.0; t.len()];
                dx[start * row..start * row + gd.len()].copy_from_slice(gd);
                acc(*x, Tensor::from_vec(t.shape(), dx).expect("slice grad"));
            }
            Op::Upsample2x(a) => {
                let s = val(*a).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx[(ch * h + y / 2) * w + x / 2] += gd[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                acc(*a, Tensor::from_vec(s, dx).expect("upsample grad"));
            }
            Op::MeanSpatial(a) => {
                let t = val(*a);
                let c = gd.len();
                let plane = t.len() / c;
                let mut dx = vec![0.0; t.len()];
                for (ch, chunk) in dx.chunks_mut(plane).enumerate() {
                    let v = gd[ch] / plane as f64;
                    chunk.iter_mut().for_each(|x| *x = v);
                }
                acc(*a, Tensor::from_vec(t.shape(), dx).expect("pool grad"));
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::SumAbs(a) => {
                let t = val(*a);
                acc(*a, t.map(|x| gd[0] * sign(x)));
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, tb.map(|x| gd[0] * x));
                }
                if wants(*b) {
                    acc(*b, ta.map(|x| gd[0] * x));
                }
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*x, Tensor::from_vec(val(*x).shape(), d).expect("dropout grad"));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheck};
    use alloc::vec::Vec;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let report: GradCheck = check_inputs(&inputs, &f, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report);
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        check(vec![t(&[3, 4], 1), t(&[3, 4], 2), t(&[1], 3)], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.div(a, v[2])?;
            let c = g.sub(b, v[2])?;
            let d = g.act(c, Activation::Tanh);
            Ok(g.sum(d))
        });
    }

    #[test]
    fn matmul_softmax_layernorm_grads() {
        check(vec![t(&[3, 5], 4), t(&[5, 4], 5), t(&[4], 6), t(&[4], 7)], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let s = g.softmax_rows(m)?;
            let n = g.layer_norm(m, v[2], v[3])?;
            let p = g.mul(s, n)?;
            let q = g.act(p, Activation::Silu);
            Ok(g.sum(q))
        });
    }

    #[test]
    fn conv_groupnorm_upsample_grads() {
        check(vec![t(&[4, 5, 6], 8), t(&[4, 4, 3, 3], 9), t(&[4], 10), t(&[4], 11)], |g, v| {
            let c = g.conv2d(v[0], v[1], 2, 1)?;
            let n = g.group_norm(c, v[2], v[3], 2)?;
            let u = g.upsample2x(n)?;
            let p = g.mean_spatial(u)?;
            let w = g.scale(p, 3.0);
            let x = g.mul(w, w)?;
            Ok(g.sum(x))
        });
    }

    #[test]
    fn structural_op_grads() {
        check(vec![t(&[2, 3], 12), t(&[3, 3], 13), t(&[5, 3], 14)], |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let tt = g.transpose(c)?;
            let r = g.reshape(tt, &[15])?;
            let s = g.slice(v[2], 1, 3)?;
            let sr = g.reshape(s, &[9])?;
            let a = g.sum_abs(sr);
            let d = g.dot(r, r)?;
            let q = g.sqrt(d);
            let ce = g.cross_entropy_rows(v[2], &[0, 2, 1, 1, 0])?;
            let tot = g.add(q, a)?;
            let tot = g.add(tot, ce)?;
            Ok(g.add_const(tot, 1.0))
        });
    }

    #[test]
    fn bias_ops_and_dropout_mask_grads() {
        let inputs = vec![t(&[3, 4], 15), t(&[4], 16), t(&[3, 2, 2], 17), t(&[3], 18)];
        let f = |g: &mut Graph, v: &[Var]| {
            let a = g.add_row(v[0], v[1])?;
            let b = g.add_channel(v[2], v[3])?;
            let a = g.dropout(a, 0.3);
            let ab = g.mul(a, a)?;
            let s1 = g.sum(ab);
            let bb = g.act(b, Activation::Silu);
            let s2 = g.mean(bb);
            g.add(s1, s2)
        };
        // Same seed each evaluation so the mask is identical across FD probes.
        let report = crate::gradcheck::check_inputs_with(&inputs, &f, 1e-6, || Graph::new(Vec::new(), Mode::Train, 99))
            .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report);
    }

    #[test]
    fn eval_mode_dropout_is_identity() {
        let mut g = Graph::inference();
        let x = g.constant(t(&[10], 1));
        assert_eq!(g.dropout(x, 0.5), x);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::inference();
        let x = g.input(t(&[3], 1), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::inference();
        let a = g.constant(t(&[2, 3], 1));
        let b = g.constant(t(&[2, 3], 2));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(t(&[4], 3));
        assert!(g.add(a, c).is_err());
        assert!(g.cross_entropy_rows(a, &[0, 3]).is_err());
    }
}
