//! Reverse-mode differentiation over the operator set, and a central
//! finite-difference gradient checker.
//!
//! A [`Tape`] records every operation in execution order, so node ids are
//! already a topological order; [`Tape::backward`] walks them in reverse
//! exactly once. Reductions keep their value in `f64` alongside the `f32`
//! tensor so finite differences of a loss are not limited by `f32`
//! rounding of the final sum.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, BatchStats, ConvSpec};
use crate::quant::QuantParams;
use crate::tensor::{concat_channels, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
        /// Statistics are constants (inference mode) rather than functions
        /// of the batch.
        frozen: bool,
    },
    Relu6(Var),
    Concat(Var, Var),
    Resize {
        x: Var,
        align_corners: bool,
    },
    Softmax2(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        x: Var,
        k: Tensor,
    },
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Bce {
        p: Var,
        target: Tensor,
        eps: f32,
    },
    WeightedSum(Vec<(Var, f32)>),
    FakeQuant {
        x: Var,
        lo: f32,
        hi: f32,
    },
    ScaleRows(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu6(x)
            | Op::Resize { x, .. }
            | Op::Softmax2(x)
            | Op::Slice { x, .. }
            | Op::MulConst { x, .. }
            | Op::Abs(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Bce { p: x, .. }
            | Op::FakeQuant { x, .. } => vec![*x],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    /// Exact value of scalar reductions.
    scalar: Option<f64>,
    op: Op,
    param: Option<String>,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn scalar_tensor(v: f64) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v as f32]).expect("scalar shape")
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_full(value, None, op, None, requires_grad)
    }

    fn push_full(&mut self, value: Tensor, scalar: Option<f64>, op: Op, param: Option<String>, requires_grad: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            scalar,
            op,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|x| self.nodes[x.0].requires_grad);
        self.push_full(scalar_tensor(v), Some(v), op, None, requires_grad)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_full(value, None, Op::Leaf, None, false)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_full(value, None, Op::Leaf, Some(name.into()), true)
    }

    /// Leaf that is differentiated but not reported as a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_full(value, None, Op::Leaf, None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a node; reductions report their `f64` accumulator.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if let Some(s) = node.scalar {
            return Ok(s);
        }
        if node.value.len() != 1 {
            return Err(Error::Contract(format!("node {} is not scalar: {}", v.0, node.value.shape())));
        }
        Ok(node.value.data()[0] as f64)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d(self.value(x), self.value(w), bias.as_deref(), &spec)?;
        Ok(self.push(y, Op::Conv { x, w, b, spec }))
    }

    /// Training-mode batch norm; returns the batch statistics so the caller
    /// can update running estimates outside the differentiated graph.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f32) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let s = xv.shape();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != s.c || b.len() != s.c {
            return Err(Error::Shape(format!("batch norm of {} channels applied to {s}", g.len())));
        }
        let stats = ops::batch_stats(xv);
        let inv_std: Vec<f32> = stats.var.iter().map(|&v| 1.0 / libm::sqrtf(v + epsilon)).collect();
        let mut xhat = xv.clone();
        let mut y = xv.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, is) = (stats.mean[c], inv_std[c]);
                for (h, o) in xhat.plane_mut(n, c).iter_mut().zip(y.plane_mut(n, c)) {
                    *h = (*h - m) * is;
                    *o = *h * g[c] + b[c];
                }
            }
        }
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen: false,
            },
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm with frozen statistics, differentiable in
    /// gamma and beta as well as the input.
    pub fn batch_norm_frozen(&mut self, x: Var, gamma: Var, beta: Var, p: &BatchNormParams) -> Result<Var> {
        let s = self.value(x).shape();
        if p.channels() != s.c {
            return Err(Error::Shape(format!("batch norm of {} channels applied to {s}", p.channels())));
        }
        let inv_std: Vec<f32> = p.running_var.iter().map(|&v| 1.0 / libm::sqrtf(v + p.epsilon)).collect();
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut xhat = self.value(x).clone();
        let mut y = xhat.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                for (h, o) in xhat.plane_mut(n, c).iter_mut().zip(y.plane_mut(n, c)) {
                    *h = (*h - p.running_mean[c]) * inv_std[c];
                    *o = *h * g[c] + b[c];
                }
            }
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen: true,
            },
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let y = ops::relu6(self.value(x));
        self.push(y, Op::Relu6(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w, align_corners)?;
        Ok(self.push(y, Op::Resize { x, align_corners }))
    }

    pub fn softmax2(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax2(self.value(x))?;
        Ok(self.push(y, Op::Softmax2(x)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product of two tensors of equal shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant. A one-channel `x` is broadcast
    /// across the channels of `k`.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        let xs = self.value(x).shape();
        let ks = k.shape();
        if (xs.n, xs.h, xs.w) != (ks.n, ks.h, ks.w) || (xs.c != ks.c && xs.c != 1) {
            return Err(Error::Shape(format!("cannot multiply {xs} by {ks}")));
        }
        let mut y = k.clone();
        let xv = self.value(x);
        for n in 0..ks.n {
            for c in 0..ks.c {
                let src = xv.plane(n, if xs.c == 1 { 0 } else { c });
                y.plane_mut(n, c).iter_mut().zip(src).for_each(|(o, &a)| *o *= a);
            }
        }
        Ok(self.push(y, Op::MulConst { x, k }))
    }

    /// Scales each batch entry `n` of `x` by `s[n]`; `s` holds one value per
    /// entry in any shape. Applied to conv weights this scales output channels.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).shape().n;
        let sv = self.value(s).data().to_vec();
        if sv.len() != rows {
            return Err(Error::Shape(format!("{} scales for {rows} rows", sv.len())));
        }
        let mut y = self.value(x).clone();
        let per = y.len() / rows;
        for (chunk, &k) in y.data_mut().chunks_mut(per).zip(&sv) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push(y, Op::ScaleRows(x, s)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f32::abs);
        self.push(y, Op::Abs(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push_scalar(v, Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push_scalar(v, Op::Sum(x))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: Tensor, eps: f32) -> Result<Var> {
        self.value(p).expect_shape(target.shape())?;
        let v = bce_value(self.value(p), &target, eps);
        Ok(self.push_scalar(v, Op::Bce { p, target, eps }))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            total += w as f64 * self.scalar(v)?;
        }
        Ok(self.push_scalar(total, Op::WeightedSum(terms.to_vec())))
    }

    /// Quantize-dequantize with straight-through gradient inside the
    /// representable range.
    pub fn fake_quant(&mut self, x: Var, p: &QuantParams) -> Var {
        let y = p.fake_quant(self.value(x));
        let (lo, hi) = p.representable_range();
        self.push(y, Op::FakeQuant { x, lo, hi })
    }

    /// Gradient of the last [`Tape::backward`] with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Named parameter gradients from the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let name = n.param.as_deref()?;
            Some((name, self.grads.get(i)?.as_ref()?))
        })
    }

    /// Adds every named gradient into the matching [`Parameter::grad`].
    pub fn accumulate_into(&self, params: &mut [Parameter]) -> Result<()> {
        for (name, g) in self.param_grads() {
            let p = params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::MissingTensor(name.into()))?;
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::alloc(Shape::new(1, 1, 1, 1), 1.0)?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let xv = self.value(*x);
                if self.needs(*x) {
                    send(*x, ops::conv2d_input_grad(g, self.value(*w), spec, xv.shape()))?;
                }
                let need_b = b.is_some_and(|b| self.needs(b));
                if self.needs(*w) || need_b {
                    let (dw, db) = ops::conv2d_param_grads(g, xv, spec, self.value(*w).shape());
                    if self.needs(*w) {
                        send(*w, dw)?;
                    }
                    if let (Some(b), true) = (b, need_b) {
                        send(*b, Tensor::from_vec(self.value(*b).shape(), db)?)?;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            } => {
                let s = g.shape();
                let count = (s.n * s.plane()) as f32;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; s.c];
                let mut dbeta = vec![0.0f32; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for (&d, &h) in g.plane(n, c).iter().zip(xhat.plane(n, c)) {
                            dgamma[c] += d * h;
                            dbeta[c] += d;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let is = inv_std[c];
                            let out = dx.plane_mut(n, c);
                            if *frozen {
                                let k = gam[c] * is;
                                out.iter_mut().zip(g.plane(n, c)).for_each(|(o, &d)| *o = k * d);
                            } else {
                                let k = gam[c] * is / count;
                                for ((o, &d), &h) in out.iter_mut().zip(g.plane(n, c)).zip(xhat.plane(n, c)) {
                                    *o = k * (count * d - dbeta[c] - h * dgamma[c]);
                                }
                            }
                        }
                    }
                    send(*x, dx)?;
                }
                if self.needs(*gamma) {
                    send(*gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?)?;
                }
                if self.needs(*beta) {
                    send(*beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?)?;
                }
            }
            Op::Relu6(x) => {
                // Subgradient 0 at both kinks.
                let dx = self.value(*x).zip_map(g, |v, d| if v > 0.0 && v < 6.0 { d } else { 0.0 })?;
                send(*x, dx)?;
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape().c;
                let cb = self.value(*b).shape().c;
                if self.needs(*a) {
                    send(*a, g.slice_channels(0, ca)?)?;
                }
                if self.needs(*b) {
                    send(*b, g.slice_channels(ca, cb)?)?;
                }
            }
            Op::Resize { x, align_corners } => {
                let s = self.value(*x).shape();
                send(*x, ops::bilinear_resize_grad(g, s.h, s.w, *align_corners))?;
            }
            Op::Softmax2(x) => {
                let y = &node.value;
                let s = y.shape();
                let p = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    let base = n * 2 * p;
                    for j in 0..p {
                        let (q0, q1) = (y.data()[base + j], y.data()[base + p + j]);
                        let (g0, g1) = (g.data()[base + j], g.data()[base + p + j]);
                        let dot = q0 * g0 + q1 * g1;
                        dx.data_mut()[base + j] = q0 * (g0 - dot);
                        dx.data_mut()[base + p + j] = q1 * (g1 - dot);
                    }
                }
                send(*x, dx)?;
            }
            Op::Slice { x, start } => {
                let s = self.value(*x).shape();
                let mut dx = Tensor::zeros(s);
                let len = g.shape().c;
                for n in 0..s.n {
                    for c in 0..len {
                        dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                send(*x, dx)?;
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    send(*a, g.clone())?;
                }
                if self.needs(*b) {
                    send(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    send(*a, g.clone())?;
                }
                if self.needs(*b) {
                    send(*b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.zip_map(self.value(*b), |d, v| d * v)?)?;
                }
                if self.needs(*b) {
                    send(*b, g.zip_map(self.value(*a), |d, v| d * v)?)?;
                }
            }
            Op::MulConst { x, k } => {
                let xs = self.value(*x).shape();
                let mut dx = Tensor::zeros(xs);
                let ks = k.shape();
                for n in 0..ks.n {
                    for c in 0..ks.c {
                        let dst = dx.plane_mut(n, if xs.c == 1 { 0 } else { c });
                        for ((o, &d), &kv) in dst.iter_mut().zip(g.plane(n, c)).zip(k.plane(n, c)) {
                            *o += d * kv;
                        }
                    }
                }
                send(*x, dx)?;
            }
            Op::Abs(x) => {
                let dx = self.value(*x).zip_map(g, |v, d| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                })?;
                send(*x, dx)?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                send(*x, Tensor::alloc(xv.shape(), g.data()[0] / xv.len() as f32)?)?;
            }
            Op::Sum(x) => {
                send(*x, Tensor::alloc(self.value(*x).shape(), g.data()[0])?)?;
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let scale = g.data()[0] / pv.len() as f32;
                let dp = pv.zip_map(target, |q, t| {
                    if q < *eps || q > 1.0 - *eps {
                        0.0
                    } else {
                        scale * (-t / q + (1.0 - t) / (1.0 - q))
                    }
                })?;
                send(*p, dp)?;
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        send(v, scalar_tensor(g.data()[0] as f64 * w as f64))?;
                    }
                }
            }
            Op::FakeQuant { x, lo, hi } => {
                let dx = self.value(*x).zip_map(g, |v, d| if v >= *lo && v <= *hi { d } else { 0.0 })?;
                send(*x, dx)?;
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let per = xv.len() / sv.len();
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (chunk, &k) in dx.data_mut().chunks_mut(per).zip(sv) {
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    send(*x, dx)?;
                }
                if self.needs(*s) {
                    let mut ds = self.value(*s).clone();
                    for ((d, gc), xc) in ds.data_mut().iter_mut().zip(g.data().chunks(per)).zip(xv.data().chunks(per)) {
                        *d = gc.iter().zip(xc).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
                    }
                    send(*s, ds)?;
                }
            }
        }
        Ok(())
    }
}

/// Mean clamped binary cross-entropy, accumulated in `f64`.
pub fn bce_value(p: &Tensor, target: &Tensor, eps: f32) -> f64 {
    let sum: f64 = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&q, &t)| {
            let q = q.clamp(eps, 1.0 - eps) as f64;
            let t = t as f64;
            -(t * libm::log(q) + (1.0 - t) * libm::log(1.0 - q))
        })
        .sum();
    sum / p.len() as f64
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub eps: f32,
    /// Bound on `|analytic - fd| / max(1, |fd|)`.
    pub tol: f32,
    /// Coordinates to sample across all parameters; `None` checks all.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tol: 1e-3,
            samples: Some(50),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares the tape gradient of the scalar built by `f` with central
/// finite differences, at randomly sampled parameter coordinates.
///
/// `f` records the function on a fresh tape given one [`Var`] per entry of
/// `params`, in order, and returns the scalar output.
pub fn grad_check<F>(params: &mut [Parameter], mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.name.clone(), p.value.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    compare_gradients(params, &analytic, f, cfg)
}

/// Finite-difference comparison against caller-supplied analytic gradients.
pub fn compare_gradients<F>(params: &mut [Parameter], analytic: &[Tensor], mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if analytic.len() != params.len() {
        return Err(Error::Contract("one analytic gradient per parameter required".into()));
    }
    let total: usize = params.iter().map(|p| p.value.len()).sum();
    let coords: Vec<(usize, usize)> = match cfg.samples {
        None => params
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| (0..p.value.len()).map(move |i| (pi, i)))
            .collect(),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..k)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut pi = 0;
                    while flat >= params[pi].value.len() {
                        flat -= params[pi].value.len();
                        pi += 1;
                    }
                    (pi, flat)
                })
                .collect()
        }
    };

    let mut eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.name.clone(), p.value.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let mut report = GradCheckReport::default();
    for (pi, idx) in coords {
        let orig = params[pi].value.data()[idx];
        let plus = orig + cfg.eps;
        let minus = orig - cfg.eps;
        params[pi].value.data_mut()[idx] = plus;
        let fp = eval(params)?;
        params[pi].value.data_mut()[idx] = minus;
        let fm = eval(params)?;
        params[pi].value.data_mut()[idx] = orig;
        // Divide by the step actually taken after f32 rounding.
        let numeric = (fp - fm) / (plus as f64 - minus as f64);
        let a = analytic[pi].data()[idx] as f64;
        let error = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        report.max_error = report.max_error.max(error);
        if !(error <= cfg.tol as f64) {
            report.failures.push(GradCheckFailure {
                param: params[pi].name.clone(),
                index: idx,
                analytic: a,
                numeric,
                error,
            });
        }
    }
    Ok(report)
}
