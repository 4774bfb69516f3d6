//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse order and accumulates vector-Jacobian products into
//! the inputs that require gradients.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{lanes, matmul_nn, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;
const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-sparse matrix used for graph aggregation (`y = A x`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub ncols: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Aggregate {
        x: Var,
        adj: Rc<SparseRows>,
    },
    SegmentMean {
        x: Var,
        lens: Rc<Vec<usize>>,
    },
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Interleave(Vec<Var>),
    GroupWeightedSum {
        w: Var,
        x: Var,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Transpose(Var),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass; not shared across threads.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    backward_order: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            backward_order: Vec::new(),
        }
    }

    /// A tape whose leaves never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order the last `backward` visited them.
    pub fn backward_order(&self) -> &[usize] {
        &self.backward_order
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that tracks gradients iff `t.requires_grad()` and the tape allows it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::matrix(m, n, matmul_nn(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape(format!(
                "bias of {} values for {} columns",
                self.value(bias).numel(),
                cols
            )));
        }
        let tb = self.value(bias).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&tb).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = lanes(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = lanes(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (out[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance, then
    /// applies `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = lanes(t.shape(), axis);
        if self.value(gain).numel() != len || self.value(bias).numel() != len {
            return Err(Error::shape(format!(
                "layer_norm affine parameters must have {len} values"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = t.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let mean = (0..len).map(|j| src[idx(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..len {
                    let xh = (src[idx(j)] - mean) * r;
                    xhat[idx(j)] = xh;
                    out[idx(j)] = g[j] * xh + b[j];
                }
                rstd.push(r);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`, inference is identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// `y = A · x` for a row-sparse `A`.
    pub fn aggregate(&mut self, x: Var, adj: Rc<SparseRows>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.rows() != adj.ncols {
            return Err(Error::shape(format!(
                "aggregate: adjacency has {} columns, features have shape {:?}",
                adj.ncols,
                t.shape()
            )));
        }
        let d = t.cols();
        let mut out = vec![0.0; adj.rows.len() * d];
        for (i, row) in adj.rows.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for &(j, w) in row {
                for (o, v) in orow.iter_mut().zip(t.row(j)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::matrix(adj.rows.len(), d, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Aggregate { x, adj }, rg))
    }

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lens: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if lens.iter().sum::<usize>() != t.rows() || lens.contains(&0) {
            return Err(Error::shape(format!(
                "segment lengths {:?} do not partition {} rows",
                lens,
                t.rows()
            )));
        }
        let d = t.cols();
        let mut out = vec![0.0; lens.len() * d];
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            let orow = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                for (o, v) in orow.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= len as f64);
            start += len;
        }
        let out = Tensor::matrix(lens.len(), d, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentMean { x, lens }, rg))
    }

    /// Scaled dot-product attention within consecutive groups of `group` rows,
    /// split into `heads` column blocks. Inputs are `(B·group) × d`.
    pub fn group_attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let tq = self.value(q);
        let (rows, d) = (tq.rows(), tq.cols());
        if tq.shape().len() != 2 || group == 0 || rows % group != 0 {
            return Err(Error::shape(format!(
                "attention: {rows} rows do not split into groups of {group}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        let (tk, tv) = (self.value(k), self.value(v));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; rows * d];
        for g in 0..groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let pbase = (g * heads + h) * group * group;
                for s in 0..group {
                    let qs = &tq.row(g * group + s)[cols.clone()];
                    let p = &mut probs[pbase + s * group..pbase + (s + 1) * group];
                    for (t, pt) in p.iter_mut().enumerate() {
                        let kt = &tk.row(g * group + t)[cols.clone()];
                        *pt = qs.iter().zip(kt).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for pt in p.iter_mut() {
                        *pt = (*pt - max).exp();
                        sum += *pt;
                    }
                    p.iter_mut().for_each(|pt| *pt /= sum);
                    let orow = &mut out[(g * group + s) * d..(g * group + s + 1) * d];
                    for (t, &pt) in p.iter().enumerate() {
                        let vt = &tv.row(g * group + t)[cols.clone()];
                        for (o, vv) in orow[cols.clone()].iter_mut().zip(vt) {
                            *o += pt * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::GroupAttention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Stacks `V` matrices of shape `N×d` into `(N·V)×d`, node-major
    /// (row `n·V + v` is row `n` of input `v`).
    pub fn interleave(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("interleave of nothing"))?;
        for &x in xs {
            self.same_shape(first, x, "interleave")?;
        }
        let (n, d) = (self.value(first).rows(), self.value(first).cols());
        let nv = xs.len();
        let mut out = vec![0.0; n * nv * d];
        for (vi, &x) in xs.iter().enumerate() {
            let t = self.value(x);
            for r in 0..n {
                out[(r * nv + vi) * d..(r * nv + vi + 1) * d].copy_from_slice(t.row(r));
            }
        }
        let out = Tensor::matrix(n * nv, d, out)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Interleave(xs.to_vec()), rg))
    }

    /// `y[n] = Σ_v w[n,v] · x[n·V + v]` for `w: N×V`, `x: (N·V)×d`.
    pub fn group_weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (n, nv) = (tw.rows(), tw.cols());
        if tx.rows() != n * nv {
            return Err(Error::shape(format!(
                "weights {:?} do not match stacked rows {}",
                tw.shape(),
                tx.rows()
            )));
        }
        let d = tx.cols();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let orow = &mut out[r * d..(r + 1) * d];
            for vi in 0..nv {
                let wv = tw.at(r, vi);
                for (o, xv) in orow.iter_mut().zip(tx.row(r * nv + vi)) {
                    *o += wv * xv;
                }
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[w, x]);
        Ok(self.push(out, Op::GroupWeightedSum { w, x }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.value(first).rows();
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, out)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(format!("row index {bad} out of {} rows", t.rows())));
        }
        let d = t.cols();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), d, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose needs a 2-D tensor"));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let out = Tensor::matrix(n, m, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Scales each row to unit L2 norm (rows with zero norm stay zero).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        let norms: Vec<f64> = t
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_EPS))
            .collect();
        let data = t
            .data()
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[1e-7, 1-1e-7]`) against 0/1 `targets`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() {
            return Err(Error::shape(format!(
                "bce: {} predictions vs {} targets",
                t.numel(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &e)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(e * p.ln() + (1.0 - e) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Back-propagates from the scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_order.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            self.backward_order.push(i);
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds gradients of every parameter leaf into `store`. Parameters that
    /// were placed on the tape but received no gradient get zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match self.grad(v) {
                Some(g) => store.get_mut(id).accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; self.value(v).numel()];
                    store.get_mut(id).accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: &[f64]) {
    if let Some(buf) = acc(grads, nodes, v) {
        buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d);
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if nodes[a.0].requires_grad {
                let da = matmul_nt(g, tb.data(), m, n, k);
                add_into(grads, nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let db = matmul_tn(ta.data(), g, m, k, n);
                add_into(grads, nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, g);
            add_into(grads, nodes, *b, g);
        }
        Op::AddBias(a, b) => {
            add_into(grads, nodes, *a, g);
            if let Some(buf) = acc(grads, nodes, *b) {
                let cols = buf.len();
                for row in g.chunks(cols) {
                    buf.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, g);
            if let Some(buf) = acc(grads, nodes, *b) {
                buf.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            if let Some(buf) = acc(grads, nodes, *a) {
                for ((d, gg), y) in buf.iter_mut().zip(g).zip(&tb) {
                    *d += gg * y;
                }
            }
            if let Some(buf) = acc(grads, nodes, *b) {
                for ((d, gg), x) in buf.iter_mut().zip(g).zip(&ta) {
                    *d += gg * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(buf) = acc(grads, nodes, *x) {
                buf.iter_mut().zip(g).for_each(|(d, gg)| *d += c * gg);
            }
        }
        Op::Relu(x) => {
            let src = val(*x).data().to_vec();
            if let Some(buf) = acc(grads, nodes, *x) {
                for ((d, gg), s) in buf.iter_mut().zip(g).zip(&src) {
                    if *s > 0.0 {
                        *d += gg;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(buf) = acc(grads, nodes, *x) {
                for ((d, gg), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *d += gg * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(buf) = acc(grads, nodes, *x) {
                for ((d, gg), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *d += gg * y * (1.0 - y);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            if let Some(buf) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            if let Some(buf) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * len * inner + j * inner + i;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            buf[idx(j)] += g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let gv = val(*gain).data().to_vec();
            if let Some(buf) = acc(grads, nodes, *gain) {
                for (k, (gg, xh)) in g.iter().zip(xhat).enumerate() {
                    buf[(k / inner) % len] += gg * xh;
                }
            }
            if let Some(buf) = acc(grads, nodes, *bias) {
                for (k, gg) in g.iter().enumerate() {
                    buf[(k / inner) % len] += gg;
                }
            }
            if let Some(buf) = acc(grads, nodes, *x) {
                let nf = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * len * inner + j * inner + i;
                        let r = rstd[o * inner + i];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..len {
                            let dxh = g[idx(j)] * gv[j];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[idx(j)];
                        }
                        for j in 0..len {
                            let dxh = g[idx(j)] * gv[j];
                            buf[idx(j)] += r / nf * (nf * dxh - sum_d - xhat[idx(j)] * sum_dx);
                        }
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(buf) = acc(grads, nodes, *x) {
                for ((d, gg), m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += gg * m;
                }
            }
        }
        Op::Aggregate { x, adj } => {
            let d = out.cols();
            if let Some(buf) = acc(grads, nodes, *x) {
                for (r, row) in adj.rows.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    for &(j, w) in row {
                        for (b, gg) in buf[j * d..(j + 1) * d].iter_mut().zip(grow) {
                            *b += w * gg;
                        }
                    }
                }
            }
        }
        Op::SegmentMean { x, lens } => {
            let d = out.cols();
            if let Some(buf) = acc(grads, nodes, *x) {
                let mut start = 0;
                for (s, &len) in lens.iter().enumerate() {
                    let grow = &g[s * d..(s + 1) * d];
                    for r in start..start + len {
                        for (b, gg) in buf[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *b += gg / len as f64;
                        }
                    }
                    start += len;
                }
            }
        }
        Op::GroupAttention {
            q,
            k,
            v,
            group,
            heads,
            probs,
        } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (rows, d) = (tq.rows(), tq.cols());
            let (group, heads) = (*group, *heads);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let groups = rows / group;
            let mut dq = vec![0.0; rows * d];
            let mut dk = vec![0.0; rows * d];
            let mut dv = vec![0.0; rows * d];
            let mut dp = vec![0.0; group];
            for gi in 0..groups {
                for h in 0..heads {
                    let c0 = h * dh;
                    let pbase = (gi * heads + h) * group * group;
                    for s in 0..group {
                        let rs = gi * group + s;
                        let gs = &g[rs * d + c0..rs * d + c0 + dh];
                        let p = &probs[pbase + s * group..pbase + (s + 1) * group];
                        for t in 0..group {
                            let rt = gi * group + t;
                            let vt = &tv.data()[rt * d + c0..rt * d + c0 + dh];
                            dp[t] = gs.iter().zip(vt).map(|(a, b)| a * b).sum();
                            for (dvv, gg) in dv[rt * d + c0..rt * d + c0 + dh].iter_mut().zip(gs) {
                                *dvv += p[t] * gg;
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for t in 0..group {
                            let ds = p[t] * (dp[t] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let rt = gi * group + t;
                            for c in c0..c0 + dh {
                                dq[rs * d + c] += ds * tk.data()[rt * d + c];
                                dk[rt * d + c] += ds * tq.data()[rs * d + c];
                            }
                        }
                    }
                }
            }
            add_into(grads, nodes, *q, &dq);
            add_into(grads, nodes, *k, &dk);
            add_into(grads, nodes, *v, &dv);
        }
        Op::Interleave(xs) => {
            let nv = xs.len();
            let d = out.cols();
            let n = out.rows() / nv;
            for (vi, &x) in xs.iter().enumerate() {
                if let Some(buf) = acc(grads, nodes, x) {
                    for r in 0..n {
                        let src = &g[(r * nv + vi) * d..(r * nv + vi + 1) * d];
                        for (b, gg) in buf[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *b += gg;
                        }
                    }
                }
            }
        }
        Op::GroupWeightedSum { w, x } => {
            let (tw, tx) = (val(*w), val(*x));
            let (n, nv, d) = (tw.rows(), tw.cols(), tx.cols());
            if nodes[w.0].requires_grad {
                let mut dw = vec![0.0; n * nv];
                for r in 0..n {
                    let grow = &g[r * d..(r + 1) * d];
                    for vi in 0..nv {
                        dw[r * nv + vi] = grow.iter().zip(tx.row(r * nv + vi)).map(|(a, b)| a * b).sum();
                    }
                }
                add_into(grads, nodes, *w, &dw);
            }
            let wd = tw.data().to_vec();
            if let Some(buf) = acc(grads, nodes, *x) {
                for r in 0..n {
                    let grow = &g[r * d..(r + 1) * d];
                    for vi in 0..nv {
                        let wv = wd[r * nv + vi];
                        for (b, gg) in buf[(r * nv + vi) * d..(r * nv + vi + 1) * d].iter_mut().zip(grow) {
                            *b += wv * gg;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(xs) => {
            let total = out.cols();
            let mut off = 0;
            for &x in xs {
                let w = val(x).cols();
                if let Some(buf) = acc(grads, nodes, x) {
                    for (r, grow) in g.chunks(total).enumerate() {
                        for (b, gg) in buf[r * w..(r + 1) * w].iter_mut().zip(&grow[off..off + w]) {
                            *b += gg;
                        }
                    }
                }
                off += w;
            }
        }
        Op::GatherRows { x, idx } => {
            let d = out.cols();
            if let Some(buf) = acc(grads, nodes, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for (b, gg) in buf[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *b += gg;
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (n, m) = (out.shape()[0], out.shape()[1]);
            if let Some(buf) = acc(grads, nodes, *x) {
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(x) => add_into(grads, nodes, *x, g),
        Op::NormalizeRows { x, norms } => {
            let d = out.cols();
            if let Some(buf) = acc(grads, nodes, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        buf[r * d + c] += (gr[c] - y[c] * dot) / nrm;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(buf) = acc(grads, nodes, *x) {
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(buf) = acc(grads, nodes, *x) {
                let n = buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Bce { p, targets } => {
            let pv = val(*p).data().to_vec();
            if let Some(buf) = acc(grads, nodes, *p) {
                let n = targets.len() as f64;
                for ((d, &pp), &e) in buf.iter_mut().zip(&pv).zip(targets) {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pp) {
                        continue;
                    }
                    *d += g[0] * (-(e / pp) + (1.0 - e) / (1.0 - pp)) / n;
                }
            }
        }
    }
}
