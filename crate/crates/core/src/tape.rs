//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The tape records a forward pass as a flat list of nodes. Every node keeps
//! its value and whatever the backward rule needs; [`Tape::backward`] walks
//! the list in reverse and accumulates adjoints. Only nodes that depend on a
//! parameter carry gradients.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` where `b` is a single row.
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// `out[r] = a[idx[r]]`, or zeros for `None`.
    Gather(Var, Vec<Option<usize>>),
    SegmentMean(Var, Vec<Vec<usize>>),
    Cos(Var),
    Gelu(Var),
    Relu(Var),
    /// Elementwise product with a fixed (already rescaled) keep mask.
    Dropout(Var, Mat),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        /// Softmax weights, one `T×T` block per (sequence, head).
        probs: Vec<Mat>,
    },
    L2Normalize(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter once per tape; repeated calls return the same
    /// variable so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                value.row_mut(r).assign(&src.row(i));
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, idx), rg)
    }

    /// Row `g` of the output is the mean of the listed input rows; an empty
    /// group yields zeros.
    pub fn segment_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((groups.len(), src.ncols()));
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut out = value.row_mut(g);
            for &r in rows {
                out += &src.row(r);
            }
            out /= rows.len() as f64;
        }
        let rg = self.rg(a);
        self.push(value, Op::SegmentMean(a, groups), rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        let rg = self.rg(a);
        self.push(value, Op::Cos(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `mask` holds `0` or `1/(1-p)` per element.
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Var {
        let value = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut r in xhat.rows_mut() {
            let mean = r.sum() / d;
            r -= mean;
            let var = r.iter().map(|x| x * x).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            r *= is;
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `rows / seq_len`
    /// independent sequences stacked row-wise. Keys with `key_valid == false`
    /// get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize, key_valid: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert_eq!(rows % seq_len, 0);
        assert_eq!(d % heads, 0);
        assert_eq!(key_valid.len(), rows);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq_len * heads);
        for s0 in (0..rows).step_by(seq_len) {
            let valid = &key_valid[s0..s0 + seq_len];
            for h in 0..heads {
                let rs = s![s0..s0 + seq_len, h * dh..(h + 1) * dh];
                let mut p = qv.slice(rs).dot(&kv.slice(rs).t());
                for mut row in p.rows_mut() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter().enumerate() {
                        if valid[j] {
                            max = max.max(x * scale);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if valid[j] { (*x * scale - max).exp() } else { 0.0 };
                        sum += *x;
                    }
                    if sum > 0.0 {
                        row /= sum;
                    }
                }
                out.slice_mut(rs).assign(&p.dot(&vv.slice(rs)));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for (i, mut r) in value.rows_mut().into_iter().enumerate() {
            let n = r.dot(&r).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("row {i} has degenerate norm {n}")));
            }
            r /= n;
            norms.push(n);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2Normalize(a, norms), rg))
    }

    /// Mean negative log-likelihood of `targets[i]` under a row-wise softmax
    /// of `logits`. Entries with `allowed[i][j] == false` are treated as
    /// `-inf` logits. Returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], allowed: Option<&[Vec<bool>]>) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dim();
        assert_eq!(targets.len(), n);
        let mut probs = Mat::zeros((n, c));
        let mut loss = 0.0;
        for i in 0..n {
            let ok = |j: usize| allowed.is_none_or(|m| m[i][j]);
            if !ok(targets[i]) {
                return Err(Error::Invalid(format!("target of row {i} is masked")));
            }
            let row = lv.row(i);
            let max = (0..c).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in (0..c).filter(|&j| ok(j)) {
                let e = (row[j] - max).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            probs.row_mut(i).mapv_inplace(|x| x / sum);
            loss -= row[targets[i]] - max - sum.ln();
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross-entropy is {loss}")));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(x) => *x += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        acc(p, g.slice(s![.., c0..c0 + w]).to_owned());
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.rg(p) {
                        acc(p, g.slice(s![r0..r0 + h, ..]).to_owned());
                    }
                    r0 += h;
                }
            }
            Op::Gather(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                }
                acc(*a, d);
            }
            Op::SegmentMean(a, groups) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (gi, rows) in groups.iter().enumerate() {
                    let w = 1.0 / rows.len().max(1) as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(w, &g.row(gi));
                    }
                }
                acc(*a, d);
            }
            Op::Cos(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= -x.sin());
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*gain) {
                    acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let mut out = dx.row_mut(r);
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| {
                            *o = inv_std[r] / d * (d * a - sum_dh - b * sum_dh_xh);
                        });
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = qv.dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros((rows, d));
                let mut dk = Mat::zeros((rows, d));
                let mut dv = Mat::zeros((rows, d));
                let mut pi = 0;
                for s0 in (0..rows).step_by(*seq_len) {
                    for h in 0..*heads {
                        let rs = s![s0..s0 + seq_len, h * dh..(h + 1) * dh];
                        let p = &probs[pi];
                        pi += 1;
                        let go = g.slice(rs);
                        dv.slice_mut(rs).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(rs).t());
                        let mut ds = &dp * p;
                        for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = dsr.sum();
                            Zip::from(&mut dsr).and(&pr).for_each(|x, &pp| *x -= pp * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(rs).assign(&ds.dot(&kv.slice(rs)));
                        dk.slice_mut(rs).assign(&ds.t().dot(&qv.slice(rs)));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::L2Normalize(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (r, mut dr) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(r);
                    let dot = yr.dot(&g.row(r));
                    dr.scaled_add(-dot, &yr);
                    dr /= norms[r];
                }
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                acc(*logits, d);
            }
        }
    }

    /// Parameter gradients keyed by id, for every parameter on this tape.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).dim()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
