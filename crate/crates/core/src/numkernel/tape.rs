// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node and
//! hand back a [`Var`] handle; [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order by construction.

use super::ops::{self, PoolKind};
use super::special::{ln_gamma, psi, psi1};
use super::{SeededRng, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for batch normalisation.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the batch's own mean and variance.
    Batch,
    /// Normalise with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced by a batch-mode normalisation,
/// with the unbiased variance used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Lgamma(Var),
    Digamma(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Pool1d {
        input: Var,
        window: usize,
        stride: usize,
        picks: Option<Vec<usize>>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Narrow {
        input: Var,
        len: usize,
    },
    Concat(Vec<Var>),
    OuterMoment {
        input: Var,
        order: u32,
    },
    Opaque {
        name: String,
        inputs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, one per tracked leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Tracked leaves in creation order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    a.zip_map(b, f)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_positive(t: &Tensor, name: &str) -> Result<()> {
    if t.data().iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires positive finite inputs")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            op => inputs_of(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A tracked input: backward produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a node the tape cannot differentiate through. Backward fails
    /// with an unsupported-op error if a gradient must pass it.
    pub fn opaque(&mut self, name: &str, value: Tensor, inputs: &[Var]) -> Var {
        self.push(
            value,
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = elementwise(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = elementwise(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = elementwise(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = elementwise(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        check_positive(self.value(a), "sqrt")?;
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        check_positive(self.value(a), "ln")?;
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Ln(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        check_positive(self.value(a), "lgamma")?;
        let v = self.value(a).map(ln_gamma);
        Ok(self.push(v, Op::Lgamma(a)))
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        check_positive(self.value(a), "digamma")?;
        let v = self.value(a).map(psi);
        Ok(self.push(v, Op::Digamma(a)))
    }

    /// `[N,F] x [F,K] -> [N,K]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(2, "matmul lhs")?;
        bv.expect_rank(2, "matmul rhs")?;
        let (n, f) = (av.shape()[0], av.shape()[1]);
        let (f2, k) = (bv.shape()[0], bv.shape()[1]);
        if f != f2 {
            return Err(Error::Shape(format!(
                "matmul: [{n},{f}] x [{f2},{k}]"
            )));
        }
        let v = matmul_raw(av.data(), bv.data(), n, f, k);
        let t = Tensor::new(vec![n, k], v)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(2, "transpose")?;
        let t = transpose_raw(av);
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// `[F] -> [n,F]` by repeating the vector as every row.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(1, "broadcast_rows")?;
        let f = av.len();
        let data = av.data().repeat(n);
        let t = Tensor::new(vec![n, f], data)?;
        Ok(self.push(t, Op::BroadcastRows(a)))
    }

    /// `[N] -> [N,k]` by repeating each entry across a row.
    pub fn broadcast_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(1, "broadcast_cols")?;
        let data = av
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, k))
            .collect();
        let t = Tensor::new(vec![av.len(), k], data)?;
        Ok(self.push(t, Op::BroadcastCols(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a `[N,K]` tensor, giving `[N]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(2, "sum_cols")?;
        let data = av.rows().map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::vector(data), Op::SumCols(a)))
    }

    /// Column sums of a `[N,F]` tensor, giving `[F]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(2, "sum_rows")?;
        let f = av.shape()[1];
        let mut data = vec![0.0; f];
        for r in av.rows() {
            for (d, x) in data.iter_mut().zip(r) {
                *d += x;
            }
        }
        Ok(self.push(Tensor::vector(data), Op::SumRows(a)))
    }

    /// Column means of a `[N,F]` tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).shape().first().copied().unwrap_or(1) as f64;
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Row-wise log-softmax of `[N,K]` logits.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(2, "log_softmax")?;
        let mut data = Vec::with_capacity(av.len());
        for r in av.rows() {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(r.iter().map(|x| x - lse));
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = ops::conv1d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv1d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn pool1d(
        &mut self,
        input: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let (v, picks) = ops::pool1d_indexed(self.value(input), kind, window, stride, rng)?;
        Ok(self.push(
            v,
            Op::Pool1d {
                input,
                window,
                stride,
                picks,
            },
        ))
    }

    /// Per-channel normalisation of `[N,C,T]` or `[N,C]`, followed by the
    /// affine map `gamma * x_hat + beta`. Batch mode also returns the batch
    /// statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let (n, c, len) = match x.shape() {
            [n, c, t] => (*n, *c, *t),
            [n, c] => (*n, *c, 1),
            s => return Err(Error::Shape(format!("batch_norm: unsupported shape {s:?}"))),
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != c || b.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels but gamma/beta have {}/{}",
                g.len(),
                b.len()
            )));
        }
        let count = (n * len) as f64;
        let xd = x.data();
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * len..(s * c + ch + 1) * len];
                        mean[ch] += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * len..(s * c + ch + 1) * len];
                        var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm: running stats length".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * len;
                for t in 0..len {
                    let h = (xd[off + t] - mean[ch]) * inv_std[ch];
                    xhat[off + t] = h;
                    out[off + t] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let var_out = self.push(
            Tensor::new(shape.clone(), out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                batch_stats: stats.is_some(),
            },
        );
        Ok((var_out, stats))
    }

    /// Mean over the time axis: `[N,C,T] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "global_avg_pool")?;
        let (n, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if len == 0 {
            return Err(Error::Shape("global_avg_pool over empty time axis".into()));
        }
        let data = x
            .data()
            .chunks(len)
            .map(|r| r.iter().sum::<f64>() / len as f64)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(input)))
    }

    /// Keeps the first `len` steps of the time axis of `[N,C,T]`.
    pub fn narrow_time(&mut self, input: Var, len: usize) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "narrow_time")?;
        let (n, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if len > t {
            return Err(Error::Shape(format!("narrow_time: {len} > {t}")));
        }
        let data = x
            .data()
            .chunks(t)
            .flat_map(|r| r[..len].iter().copied())
            .collect();
        let out = Tensor::new(vec![n, c, len], data)?;
        Ok(self.push(out, Op::Narrow { input, len }))
    }

    /// Concatenation of `[N,F_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let n = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            v.expect_rank(2, "concat")?;
            if v.shape()[0] != n {
                return Err(Error::Shape(format!(
                    "concat: {} rows vs {n}",
                    v.shape()[0]
                )));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let t = Tensor::new(vec![n, total], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Mean over samples of the `order`-fold outer product of each row of
    /// `[N,L]`, flattened to `[L^order]`.
    pub fn outer_moment(&mut self, input: Var, order: u32) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(2, "outer_moment")?;
        if order == 0 {
            return Err(Error::Config("outer_moment order must be >= 1".into()));
        }
        let (n, l) = (x.shape()[0], x.shape()[1]);
        let size = l.pow(order);
        let mut acc = vec![0.0; size];
        let mut cur = Vec::with_capacity(size);
        let mut next = Vec::with_capacity(size);
        for row in x.rows() {
            cur.clear();
            cur.push(1.0);
            for _ in 0..order {
                next.clear();
                for &p in &cur {
                    next.extend(row.iter().map(|v| p * v));
                }
                std::mem::swap(&mut cur, &mut next);
            }
            for (a, c) in acc.iter_mut().zip(&cur) {
                *a += c;
            }
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(self.push(Tensor::vector(acc), Op::OuterMoment { input, order }))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against a one-hot constant.
    pub fn softmax_cross_entropy(&mut self, logits: Var, one_hot: Var) -> Result<Var> {
        let n = self.shape(logits)[0] as f64;
        let ls = self.log_softmax(logits)?;
        let picked = self.mul(ls, one_hot)?;
        let s = self.sum_all(picked);
        Ok(self.scale(s, -1.0 / n))
    }

    /// Gradients of the scalar `output` w.r.t. every tracked leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let leaves: Vec<Var> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect();
        // keep only leaf gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            leaves,
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| g.zip_map(a, f).expect("shape");
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = zip(val(*b), &|g, y| g * y);
                let gb = zip(val(*a), &|g, x| g * x);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let ga = zip(bv, &|g, y| g / y);
                let gb = g
                    .zip_map(&node.value, |g, q| g * q)
                    .and_then(|t| t.zip_map(bv, |gq, y| -gq / y))
                    .expect("shape");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sqrt(a) => self.accumulate(grads, *a, zip(&node.value, &|g, s| g * 0.5 / s)),
            Op::Ln(a) => self.accumulate(grads, *a, zip(val(*a), &|g, x| g / x)),
            Op::Exp(a) => self.accumulate(grads, *a, zip(&node.value, &|g, e| g * e)),
            Op::Relu(a) => {
                self.accumulate(grads, *a, zip(val(*a), &|g, x| if x > 0.0 { g } else { 0.0 }))
            }
            Op::Softplus(a) => self.accumulate(grads, *a, zip(val(*a), &|g, x| g * sigmoid(x))),
            Op::Lgamma(a) => self.accumulate(grads, *a, zip(val(*a), &|g, x| g * psi(x))),
            Op::Digamma(a) => self.accumulate(grads, *a, zip(val(*a), &|g, x| g * psi1(x))),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, f, k) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(bv);
                    let ga = matmul_raw(g.data(), bt.data(), n, k, f);
                    self.accumulate(grads, *a, Tensor::new(vec![n, f], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(av);
                    let gb = matmul_raw(at.data(), g.data(), f, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![f, k], gb)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose_raw(g)),
            Op::BroadcastRows(a) => {
                let f = val(*a).len();
                let mut ga = vec![0.0; f];
                for r in g.data().chunks(f) {
                    for (d, x) in ga.iter_mut().zip(r) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, Tensor::vector(ga));
            }
            Op::BroadcastCols(a) => {
                let k = g.shape()[1];
                let ga = g.data().chunks(k).map(|r| r.iter().sum()).collect();
                self.accumulate(grads, *a, Tensor::vector(ga));
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let k = av.shape()[1];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, k))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let data = g.data().repeat(av.shape()[0]);
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::LogSoftmax(a) => {
                let k = g.shape()[1];
                let mut ga = Vec::with_capacity(g.len());
                for (gr, lr) in g.data().chunks(k).zip(node.value.data().chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    ga.extend(gr.iter().zip(lr).map(|(gi, li)| gi - li.exp() * gs));
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gx, gw) = ops::conv1d_backward(val(*input), val(*kernel), g, *stride, *padding);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *kernel, gw);
            }
            Op::Pool1d {
                input,
                window,
                stride,
                picks,
            } => {
                let gx = ops::pool1d_backward(val(*input).shape(), g, *window, *stride, picks.as_deref());
                self.accumulate(grads, *input, gx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = xhat.shape();
                let (n, c) = (shape[0], shape[1]);
                let len = if shape.len() == 3 { shape[2] } else { 1 };
                let gam = val(*gamma).data();
                let (gd, hd) = (g.data(), xhat.data());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * len;
                        for t in off..off + len {
                            dgamma[ch] += gd[t] * hd[t];
                            dbeta[ch] += gd[t];
                        }
                    }
                }
                if self.nodes[input.0].needs_grad {
                    let mut gx = vec![0.0; gd.len()];
                    let count = (n * len) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * len;
                            for t in off..off + len {
                                gx[t] = if *batch_stats {
                                    // d/dx of gamma * (x - mu) / sigma with mu, sigma from the batch
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gd[t] - dbeta[ch] - hd[t] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[t]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(shape.to_vec(), gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::vector(dgamma));
                self.accumulate(grads, *beta, Tensor::vector(dbeta));
            }
            Op::GlobalAvgPool(a) => {
                let av = val(*a);
                let len = av.shape()[2];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x / len as f64, len))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::Narrow { input, len } => {
                let shape = val(*input).shape();
                let t = shape[2];
                let mut data = vec![0.0; shape.iter().product()];
                for (dst, src) in data.chunks_mut(t).zip(g.data().chunks(*len)) {
                    dst[..*len].copy_from_slice(src);
                }
                self.accumulate(grads, *input, Tensor::new(shape.to_vec(), data)?);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let f = val(*p).shape()[1];
                    let mut data = Vec::with_capacity(n * f);
                    for i in 0..n {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + f]);
                    }
                    offset += f;
                    self.accumulate(grads, *p, Tensor::new(vec![n, f], data)?);
                }
            }
            Op::OuterMoment { input, order } => {
                let x = val(*input);
                let gx = outer_moment_backward(x, *order as usize, g.data());
                self.accumulate(grads, *input, gx);
            }
            Op::Opaque { name, inputs } => {
                if inputs.iter().any(|v| self.nodes[v.0].needs_grad) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sqrt(a)
        | Op::Ln(a)
        | Op::Exp(a)
        | Op::Relu(a)
        | Op::Softplus(a)
        | Op::Lgamma(a)
        | Op::Digamma(a)
        | Op::Transpose(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::SumAll(a)
        | Op::SumCols(a)
        | Op::SumRows(a)
        | Op::LogSoftmax(a)
        | Op::GlobalAvgPool(a) => vec![*a],
        Op::Conv1d { input, kernel, .. } => vec![*input, *kernel],
        Op::Pool1d { input, .. } | Op::Narrow { input, .. } | Op::OuterMoment { input, .. } => {
            vec![*input]
        }
        Op::BatchNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
        Op::Concat(parts) => parts.clone(),
        Op::Opaque { inputs, .. } => inputs.clone(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, f: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let dst = &mut out[i * k..(i + 1) * k];
        for (j, &av) in a[i * f..(i + 1) * f].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *d += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose shape")
}

fn outer_moment_backward(x: &Tensor, order: usize, g: &[f64]) -> Tensor {
    let (n, l) = (x.shape()[0], x.shape()[1]);
    let inv = 1.0 / n as f64;
    let mut gx = vec![0.0; n * l];
    let mut digits = vec![0usize; order];
    let mut prefix = vec![1.0; order + 1];
    let mut suffix = vec![1.0; order + 1];
    for (i, row) in x.rows().enumerate() {
        let dst = &mut gx[i * l..(i + 1) * l];
        for (flat, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let mut rem = flat;
            for d in digits.iter_mut().rev() {
                *d = rem % l;
                rem /= l;
            }
            for r in 0..order {
                prefix[r + 1] = prefix[r] * row[digits[r]];
            }
            for r in (0..order).rev() {
                suffix[r] = suffix[r + 1] * row[digits[r]];
            }
            for r in 0..order {
                dst[digits[r]] += gv * inv * prefix[r] * suffix[r + 1];
            }
        }
    }
    Tensor::new(vec![n, l], gx).expect("outer moment shape")
}
