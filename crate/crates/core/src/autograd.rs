//! Reverse-mode differentiation over a recorded tape.
//!
//! Each op evaluates its forward kernel immediately and appends a node holding
//! the result and enough context to compute input gradients. [`Tape::backward`]
//! walks the nodes in reverse, then adds parameter gradients into the owning
//! [`ParamStore`]. Parameters without a gradient buffer (frozen) are skipped.

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instrument;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the output of [`Tape::gradients`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
    },
    Sum(Var),
    PickMean {
        x: Var,
        at: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Backward formulas that can be deliberately broken to prove the gradient
/// checker catches a wrong derivative.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    LayerNorm,
    Softmax,
    Cosine,
}

thread_local! {
    static FAULT: Cell<Option<BackwardFault>> = const { Cell::new(None) };
}

/// Corrupts one backward formula on the current thread until reset with `None`.
#[doc(hidden)]
pub fn inject_backward_fault(fault: Option<BackwardFault>) {
    FAULT.with(|f| f.set(fault));
}

fn faulty(which: BackwardFault) -> bool {
    FAULT.with(|f| f.get() == Some(which))
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; gradients stop here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).shared_value(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// `x · w + b` for a weight `in×out` and bias of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (xhat, rstd) = tensor::layer_norm_parts(xv, eps);
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN must survive the hinge so divergence stays visible.
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.gather_rows(x, &[i])
    }

    /// Cosine similarity of two equal-size tensors viewed as flat vectors.
    /// Zero-norm operands give `0` with zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = tensor::cosine_similarity(av.data(), bv.data())?;
        let na = av.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, na, nb }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Adds single-element vars.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs
            .first()
            .ok_or_else(|| Error::Usage("sum of no terms".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Mean of the entries of matrix `x` at the given `(row, col)` positions.
    pub fn pick_mean(&mut self, x: Var, at: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let total: f64 = at.iter().map(|&(r, c)| xv.at(r, c)).sum();
        let out = Tensor::scalar(total / at.len() as f64);
        self.push(out, Op::PickMean { x, at: at.to_vec() })
    }

    /// Non-causal multi-head scaled dot-product attention built from recorded
    /// primitives; same arithmetic as [`tensor::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let d = self.value(q).cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (m, n) = (self.value(q).rows(), self.value(k).rows());
        if self.value(k).cols() != d || self.value(v).cols() != d || self.value(v).rows() != n {
            return Err(Error::Dimension {
                op: "attention",
                left: self.value(k).shape().to_vec(),
                right: self.value(v).shape().to_vec(),
            });
        }
        instrument::record_attention(m, n, d);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * hd, hd),
                    self.slice_cols(k, h * hd, hd),
                    self.slice_cols(v, h * hd, hd),
                )
            };
            let s = self.matmul_bt(qh, kh)?;
            let s = self.scale(s, scale);
            let w = self.softmax_rows(s);
            outs.push(self.matmul(w, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Back-propagates from the single-element `loss` and adds the resulting
    /// gradients into the trainable parameters of `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate(&g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul_bt(g, val(*b))?;
                let db = tensor::matmul_at(val(*a), g)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulBt(a, b) => {
                let da = tensor::matmul(g, val(*b))?;
                let db = tensor::matmul_at(g, val(*a))?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::AddRowBias(x, b) => {
                acc(grads, *x, g.clone());
                let c = g.cols();
                let mut db = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let shape = val(*b).shape().to_vec();
                acc(grads, *b, Tensor::from_vec(shape, db)?);
            }
            Op::Scale(x, s) => acc(grads, *x, g.scale(*s)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.mul(y)?;
                for (row, (yr, gr)) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c).zip(g.data().chunks_exact(c)))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, yv) in row.iter_mut().zip(yr) {
                        *d -= yv * dot;
                    }
                }
                if faulty(BackwardFault::Softmax) {
                    dx = dx.scale(1.5);
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (row, yr) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                {
                    let total: f64 = row.iter().sum();
                    for (d, lp) in row.iter_mut().zip(yr) {
                        *d -= lp.exp() * total;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let d = xhat.cols();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = Tensor::zeros(xhat.shape());
                for r in 0..xhat.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gv.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        let dxh = gr[j] * gv.data()[j];
                        out[j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                if faulty(BackwardFault::LayerNorm) {
                    dx = dx.scale(1.5);
                }
                acc(grads, *x, dx);
                acc(grads, *gain, Tensor::from_vec(gv.shape().to_vec(), dgain)?);
                acc(
                    grads,
                    *bias,
                    Tensor::from_vec(val(*bias).shape().to_vec(), dbias)?,
                );
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let mut dx = Tensor::from_vec(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| gi * tensor::gelu_grad_scalar(xi))
                        .collect(),
                )?;
                if faulty(BackwardFault::Gelu) {
                    dx = dx.scale(1.5);
                }
                acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = Tensor::from_vec(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                )?;
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(grads, p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::Transpose(x) => acc(grads, *x, g.transpose()),
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Cosine { a, b, na, nb } => {
                if *na == 0.0 || *nb == 0.0 {
                    return Ok(());
                }
                let c = node.value.item();
                let mut dc = g.item();
                if faulty(BackwardFault::Cosine) {
                    dc *= 1.5;
                }
                let (av, bv) = (val(*a), val(*b));
                let inv = 1.0 / (na * nb);
                let da = bv.scale(dc * inv).sub(&av.scale(dc * c / (na * na)))?;
                let db = av.scale(dc * inv).sub(&bv.scale(dc * c / (nb * nb)))?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Sum(x) => {
                let shape = val(*x).shape().to_vec();
                acc(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::PickMean { x, at } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let c = xv.cols();
                let share = g.item() / at.len() as f64;
                for &(r, col) in at {
                    dx.data_mut()[r * c + col] += share;
                }
                acc(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
