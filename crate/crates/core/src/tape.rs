//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Values are addressed by [`Var`] handles. [`Tape::backward`] replays the
//! record in reverse exactly once and returns a [`Gradients`] map with one
//! entry per registered parameter.
//!
//! ```
//! use unisoma_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::new([2], vec![3.0, -1.0]).unwrap()).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, -2.0]);
//! ```

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{axis_extents, gemm_acc, numel, suffix_repeats, MatmulPlan, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive defined outside this module.
///
/// `backward` receives the input values, the forward output and the
/// incoming gradient, and returns one gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    ClampMin(Var, f64),
    SignFloor(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    Normalize(Var, f64),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if it was
    /// reachable from a differentiable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every registered parameter (zeros when unused by the loss).
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

fn sign_floor(x: f64, eps: f64) -> f64 {
    if x.abs() >= eps {
        x
    } else if x >= 0.0 {
        eps
    } else {
        -eps
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient (data, masks).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// Registers `params[key]` as a differentiable leaf. Repeated lookups of
    /// the same key return the same handle, so shared weights accumulate.
    pub fn param(&mut self, params: &ModelParams, key: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(key) {
            return Ok(v);
        }
        let value = params
            .get(key)
            .ok_or_else(|| Error::MissingParam(key.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.params.insert(key.to_string(), v);
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(&Tensor, &Tensor) -> Result<Tensor>, op: Op) -> Result<Var> {
        let value = f(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    /// Elementwise `a + b`; `b` may be a shape suffix of `a` (bias style).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Tensor::add, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Tensor::sub, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Tensor::mul, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        fn f(x: &Tensor, y: &Tensor) -> Result<Tensor> {
            suffix_repeats(x.shape(), y.shape(), "div")?;
            let yl = y.len().max(1);
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v / y.data()[i % yl])
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        self.binary(a, b, "div", f, Op::Div(a, b))
    }

    /// Sum of any number of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Config("add_all of zero values".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg, "sqrt")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(libm::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg, "exp")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg, "relu")
    }

    /// `max(a, floor)` elementwise; the gradient passes where `a >= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin(a, floor), rg, "clamp_min")
    }

    /// Floors `|a|` at `eps` keeping the sign (zero maps to `+eps`).
    pub fn sign_floor(&mut self, a: Var, eps: f64) -> Result<Var> {
        let value = self.value(a).map(|x| sign_floor(x, eps));
        let rg = self.rg(a);
        self.push(value, Op::SignFloor(a, eps), rg, "sign_floor")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).sum_axis(axis)?;
        let rg = self.rg(a);
        self.push(value, Op::SumAxis(a, axis), rg, "sum_axis")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "matmul", Tensor::matmul, Op::MatMul(a, b))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a, axis), rg, "softmax")
    }

    /// Zero-mean, unit-variance rows over the last axis (`eps` inside the root).
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let (mean, inv) = row_moments(x.row(r), eps);
            for v in out.row_mut(r) {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Normalize(a, eps), rg, "normalize")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Rows `indices` of `a` along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, indices.to_vec()), rg, "gather_rows")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(value, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(a);
        self.push(value, Op::Narrow(a, axis, start), rg, "narrow")
    }

    /// Stacks same-shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    /// Records a user-defined primitive whose forward value was computed by
    /// the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let name = op.name();
        self.push(value, Op::Custom(op, inputs.to_vec()), rg, name)
    }

    /// Propagates d`loss`/d· to every differentiable value. The tape can be
    /// replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(shape));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(k, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (k.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc_suffix(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc_suffix(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, g.mul(bv)?)?;
                }
                if self.rg(*b) {
                    self.acc_suffix(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    let bl = bv.len().max(1);
                    let d = g.data().iter().enumerate().map(|(k, &x)| x / bv.data()[k % bl]).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?)?;
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let bl = bv.len().max(1);
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .enumerate()
                        .map(|(k, (&x, &o))| -x * o / bv.data()[k % bl])
                        .collect();
                    self.acc_suffix(grads, *b, Tensor::new(g.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => self.acc(grads, *a, g.clone())?,
            Op::Sqrt(a) => self.acc(grads, *a, g.zip_map(out, |x, s| x * 0.5 / s)?)?,
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(out, |x, e| x * e)?)?,
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |x, v| x * gelu_grad(v))?;
                self.acc(grads, *a, d)?
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })?;
                self.acc(grads, *a, d)?
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let d = g.zip_map(self.value(*a), |x, v| if v >= f { x } else { 0.0 })?;
                self.acc(grads, *a, d)?
            }
            Op::SignFloor(a, eps) => {
                let e = *eps;
                let d = g.zip_map(self.value(*a), |x, v| if v.abs() >= e { x } else { 0.0 })?;
                self.acc(grads, *a, d)?
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), s))?
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, dim, inner) = axis_extents(&shape, *axis);
                let mut d = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    for k in 0..dim {
                        let dst = &mut d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                        dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, d)?)?
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads)?,
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()?)?,
            Op::Softmax(a, axis) => {
                let (outer, dim, inner) = axis_extents(out.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * dim + j) * inner + k;
                        let dot: f64 = (0..dim).map(|j| g.data()[idx(j)] * out.data()[idx(j)]).sum();
                        for j in 0..dim {
                            d[idx(j)] = out.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(out.shape().to_vec(), d)?)?
            }
            Op::Normalize(a, eps) => {
                let x = self.value(*a);
                let c = x.cols() as f64;
                let mut d = Tensor::zeros(x.shape().to_vec());
                for r in 0..x.rows() {
                    let (_, inv) = row_moments(x.row(r), *eps);
                    let gy = g.row(r);
                    let y = out.row(r);
                    let mg: f64 = gy.iter().sum::<f64>() / c;
                    let mgy: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (j, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = inv * (gy[j] - mg - y[j] * mgy);
                    }
                }
                self.acc(grads, *a, d)?
            }
            Op::Reshape(a) => self.acc(grads, *a, g.reshape(self.shape(*a).to_vec())?)?,
            Op::Gather(a, indices) => {
                let shape = self.shape(*a).to_vec();
                let inner = numel(&shape[1..]);
                let mut d = vec![0.0; numel(&shape)];
                for (r, &src) in indices.iter().enumerate() {
                    let gr = &g.data()[r * inner..(r + 1) * inner];
                    for (dst, v) in d[src * inner..(src + 1) * inner].iter_mut().zip(gr) {
                        *dst += v;
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, d)?)?
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        self.acc(grads, p, g.narrow(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let shape = self.shape(*a).to_vec();
                let (outer, dim, inner) = axis_extents(&shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; numel(&shape)];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * dim + start) * inner;
                    d[base..base + len * inner].copy_from_slice(src);
                }
                self.acc(grads, *a, Tensor::new(shape, d)?)?
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g);
                if gs.len() != inputs.len() {
                    return Err(Error::Config("custom op returned the wrong number of gradients".into()));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    self.acc(grads, v, gi)?;
                }
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(av.shape(), bv.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut da = self.rg(a).then(|| vec![0.0; av.len()]);
        let mut db = self.rg(b).then(|| vec![0.0; bv.len()]);
        let mut scratch_bt = vec![0.0; k * n];
        let mut scratch_at = vec![0.0; m * k];
        for (bo, (ba, bb)) in plan.batch_offsets().enumerate() {
            let gblk = &g.data()[bo * m * n..(bo + 1) * m * n];
            let ablk = &av.data()[ba * m * k..(ba + 1) * m * k];
            let bblk = &bv.data()[bb * k * n..(bb + 1) * k * n];
            if let Some(da) = da.as_mut() {
                // dA += G · Bᵀ
                for p in 0..k {
                    for j in 0..n {
                        scratch_bt[j * k + p] = bblk[p * n + j];
                    }
                }
                gemm_acc(gblk, &scratch_bt, &mut da[ba * m * k..(ba + 1) * m * k], m, n, k);
            }
            if let Some(db) = db.as_mut() {
                // dB += Aᵀ · G
                for i in 0..m {
                    for p in 0..k {
                        scratch_at[p * m + i] = ablk[i * k + p];
                    }
                }
                gemm_acc(&scratch_at, gblk, &mut db[bb * k * n..(bb + 1) * k * n], k, m, n);
            }
        }
        if let Some(da) = da {
            self.acc(grads, a, Tensor::new(av.shape().to_vec(), da)?)?;
        }
        if let Some(db) = db {
            self.acc(grads, b, Tensor::new(bv.shape().to_vec(), db)?)?;
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Accumulates a gradient computed at the broadcast shape into a value
    /// whose shape is a suffix of it.
    fn acc_suffix(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let shape = self.shape(v).to_vec();
        if g.shape() == shape.as_slice() {
            return self.acc(grads, v, g);
        }
        let n = numel(&shape).max(1);
        let mut d = vec![0.0; numel(&shape)];
        for (k, x) in g.data().iter().enumerate() {
            d[k % n] += x;
        }
        self.acc(grads, v, Tensor::new(shape, d)?)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
    (mean, 1.0 / libm::sqrt(var + eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.5)).unwrap();
        let g = tape.backward(x).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_sum_gradient_is_coefficient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let c = tape.constant(Tensor::new([3], vec![0.5, -4.0, 7.0]).unwrap()).unwrap();
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.5, -4.0, 7.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([2])).unwrap();
        assert_eq!(tape.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), Error::TapeConsumed);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut params = ModelParams::default();
        params.insert("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "w").unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params()["w"].data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut params = ModelParams::default();
        params.insert("used", Tensor::scalar(1.0));
        params.insert("idle", Tensor::zeros([2, 2]));
        let mut tape = Tape::new();
        let u = tape.param(&params, "used").unwrap();
        tape.param(&params, "idle").unwrap();
        let g = tape.backward(u).unwrap();
        assert_eq!(g.params()["idle"], Tensor::zeros([2, 2]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(-1.0)).unwrap();
        let err = tape.sqrt(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "sqrt", .. }));
    }

    #[test]
    fn missing_param_is_named() {
        let mut tape = Tape::new();
        let err = tape.param(&ModelParams::default(), "a/b").unwrap_err();
        assert_eq!(err, Error::MissingParam("a/b".into()));
    }
}
