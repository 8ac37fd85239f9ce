//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted and the backward pass is a reverse sweep.
//! Gradients are only materialised for nodes that depend on a trainable leaf;
//! frozen weights are recorded as constants and never receive gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One attention problem: queries `q_start..q_start+q_len` attend to keys and
/// values `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention block covering `len` rows from `start`.
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

/// Which (query, key) pairs inside a segment may interact, in segment-local indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Queries `< n` only see keys `< n`; the remaining queries see everything.
    QueryPrefix(usize),
    /// Causal, with a per-head linear penalty on the distance `i − j` added to
    /// the scores (ALiBi). Head `h` of `H` uses slope `2^(−8(h+1)/H)`.
    CausalRecency,
}

impl Mask {
    fn recency_slope(self, head: usize, heads: usize) -> Option<f32> {
        match self {
            Mask::CausalRecency => Some(2f32.powf(-8.0 * (head + 1) as f32 / heads as f32)),
            _ => None,
        }
    }

    #[inline]
    fn allowed(self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal | Mask::CausalRecency => j <= i,
            Mask::QueryPrefix(n) => i >= n || j < n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    pub mask: Mask,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row (mean, reciprocal std).
        stats: Vec<(f32, f32)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Arc<AttentionSpec>,
        probs: Vec<f32>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowNormalize {
        x: Var,
        norms: Vec<f32>,
    },
    Sum(Var),
    /// Scalar-valued kernel whose local gradients were computed in the forward pass.
    Scalar {
        parents: Vec<Var>,
        grads: Vec<Option<Tensor>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f32 = 1e-5;

impl Graph {
    /// A graph that tracks gradients towards trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph that never records gradient requirements.
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used for probes and tests).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The parameter as a leaf; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Leaf, !store.is_frozen(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(format!(
                "matmul {:?} by {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + row`, broadcasting a `[1 × c]` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "add_row {:?} + {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut out = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += *b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each `[1 × c]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(Error::shape("layer_norm affine width"));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(xv.rows(), c);
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over the given segments.
    ///
    /// `q`, `k` share width `heads · d_head`; `v` has width `heads · d_value`.
    /// Every query row must be covered by exactly one segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Arc<AttentionSpec>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = spec.heads;
        if h == 0 || qv.cols() != kv.cols() || qv.cols() % h != 0 || vv.cols() % h != 0 {
            return Err(Error::shape("attention head widths"));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::shape("attention keys/values row mismatch"));
        }
        let dq = qv.cols();
        let dv = vv.cols();
        let dh = dq / h;
        let dvh = dv / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut covered = vec![false; qv.rows()];
        for s in &spec.segments {
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() || s.k_len == 0 {
                return Err(Error::shape("attention segment out of range"));
            }
            for c in &mut covered[s.q_start..s.q_start + s.q_len] {
                if *c {
                    return Err(Error::shape("attention segments overlap"));
                }
                *c = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::shape("attention segments leave query rows uncovered"));
        }
        let total: usize = spec.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * h;
        let mut probs = vec![0.0f32; total];
        let mut out = Tensor::zeros(qv.rows(), dv);
        let mut off = 0;
        for s in &spec.segments {
            let (ql, kl) = (s.q_len, s.k_len);
            for head in 0..h {
                let p = &mut probs[off..off + ql * kl];
                gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    MatRef::row_major(&qv.data()[s.q_start * dq + head * dh..], dq),
                    MatRef::transposed(&kv.data()[s.k_start * dq + head * dh..], dq),
                    0.0,
                    p,
                    kl,
                );
                let slope = spec.mask.recency_slope(head, h);
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    if let Some(sl) = slope {
                        for (j, x) in row.iter_mut().enumerate().take(i + 1) {
                            *x -= sl * (i - j) as f32;
                        }
                    }
                    let mut mx = f32::NEG_INFINITY;
                    for (j, x) in row.iter().enumerate() {
                        if spec.mask.allowed(i, j) && *x > mx {
                            mx = *x;
                        }
                    }
                    let mut z = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if spec.mask.allowed(i, j) {
                            *x = (*x - mx).exp();
                            z += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    let inv = 1.0 / z;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
                gemm(
                    ql,
                    kl,
                    dvh,
                    1.0,
                    MatRef::row_major(p, kl),
                    MatRef::row_major(&vv.data()[s.k_start * dv + head * dvh..], dv),
                    0.0,
                    &mut out.data_mut()[s.q_start * dv + head * dvh..],
                    dv,
                );
                off += ql * kl;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[i] = x[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of {} rows",
                xv.rows()
            )));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(x, (start..start + len).collect())
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Records a scalar produced by an external kernel together with its
    /// gradients towards each parent.
    pub fn scalar_op(&mut self, parents: &[Var], value: f32, grads: Vec<Option<Tensor>>) -> Result<Var> {
        if parents.len() != grads.len() {
            return Err(Error::shape("scalar_op parent/gradient count"));
        }
        for (p, g) in parents.iter().zip(&grads) {
            if let Some(g) = g {
                if g.shape() != self.value(*p).shape() {
                    return Err(Error::shape("scalar_op gradient shape"));
                }
            }
        }
        let rg = parents.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                parents: parents.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// `x · w + b` with `w: [in × out]`, `b: [1 × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a `[1 × 1]` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::shape("backward expects a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Ok(Gradients {
                grads,
                params: self.params.clone(),
            });
        }
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &*self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if rg(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        da.data_mut(),
                        k,
                    );
                    accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g.data(), n),
                        0.0,
                        db.data_mut(),
                        n,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = zip(g, val(*b), |x, y| x * y);
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = zip(g, val(*a), |x, y| x * y);
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if rg(*row) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.data_mut().iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    accumulate(grads, *row, d);
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    let s = *s;
                    accumulate(grads, *x, g.map(|v| v * s));
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let d = zip(g, val(*x), |gv, xv| gv * gelu_grad(xv));
                    accumulate(grads, *x, d);
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let d = zip(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = val(*x);
                let gam = val(*gamma).data();
                let c = xv.cols();
                let mut dx = if rg(*x) { Some(Tensor::zeros(xv.rows(), c)) } else { None };
                let mut dg = vec![0.0f32; c];
                let mut db = vec![0.0f32; c];
                let mut xhat = vec![0.0f32; c];
                let mut dxhat = vec![0.0f32; c];
                for r in 0..xv.rows() {
                    let (mean, rstd) = stats[r];
                    let row = xv.row(r);
                    let gr = g.row(r);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().sum::<f32>() / c as f32;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::row_vector(dg));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, Tensor::row_vector(db));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = val(*p).rows();
                    if rg(*p) {
                        accumulate(grads, *p, g.slice_rows(start, r));
                    }
                    start += r;
                }
            }
            Op::GatherRows(x, idx) => {
                if rg(*x) {
                    let xv = val(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (dst, src) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dst += *src;
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::RowNormalize { x, norms } => {
                if rg(*x) {
                    let y = &*node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let xv = val(*x);
                    accumulate(grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
                }
            }
            Op::Scalar { parents, grads: local } => {
                let up = g.item();
                for (p, lg) in parents.iter().zip(local) {
                    if let (true, Some(lg)) = (rg(*p), lg) {
                        accumulate(grads, *p, lg.map(|v| v * up));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let rg = |x: Var| self.nodes[x.0].requires_grad;
        let (qv, kv, vv) = (
            &*self.nodes[q.0].value,
            &*self.nodes[k.0].value,
            &*self.nodes[v.0].value,
        );
        let h = spec.heads;
        let dq = qv.cols();
        let dv = vv.cols();
        let dh = dq / h;
        let dvh = dv / h;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut gq = rg(q).then(|| Tensor::zeros(qv.rows(), dq));
        let mut gk = rg(k).then(|| Tensor::zeros(kv.rows(), dq));
        let mut gv = rg(v).then(|| Tensor::zeros(vv.rows(), dv));
        let mut off = 0;
        let mut dp = Vec::new();
        for s in &spec.segments {
            let (ql, kl) = (s.q_len, s.k_len);
            for head in 0..h {
                let p = &probs[off..off + ql * kl];
                off += ql * kl;
                let go = MatRef::row_major(&g.data()[s.q_start * dv + head * dvh..], dv);
                if let Some(gv) = gv.as_mut() {
                    gemm(
                        kl,
                        ql,
                        dvh,
                        1.0,
                        MatRef::transposed(p, kl),
                        go,
                        1.0,
                        &mut gv.data_mut()[s.k_start * dv + head * dvh..],
                        dv,
                    );
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                dp.clear();
                dp.resize(ql * kl, 0.0);
                gemm(
                    ql,
                    dvh,
                    kl,
                    1.0,
                    go,
                    MatRef::transposed(&vv.data()[s.k_start * dv + head * dvh..], dv),
                    0.0,
                    &mut dp,
                    kl,
                );
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut dp[i * kl..(i + 1) * kl];
                    let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot);
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(
                        ql,
                        kl,
                        dh,
                        scale,
                        MatRef::row_major(&dp, kl),
                        MatRef::row_major(&kv.data()[s.k_start * dq + head * dh..], dq),
                        1.0,
                        &mut gq.data_mut()[s.q_start * dq + head * dh..],
                        dq,
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(
                        kl,
                        ql,
                        dh,
                        scale,
                        MatRef::transposed(&dp, kl),
                        MatRef::row_major(&qv.data()[s.q_start * dq + head * dh..], dq),
                        1.0,
                        &mut gk.data_mut()[s.k_start * dq + head * dh..],
                        dq,
                    );
                }
            }
        }
        if let Some(t) = gq {
            accumulate(grads, q, t);
        }
        if let Some(t) = gk {
            accumulate(grads, k, t);
        }
        if let Some(t) = gv {
            accumulate(grads, v, t);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

#[inline]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter that received one, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        crate::params::normal_init(rng, r, c, 1.0)
    }

    /// Central differences of `f` over every entry of `x`, in f64 accumulation.
    fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f32) -> Tensor {
        let eps = 1e-2f32;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            out.data_mut()[i] = ((f(&xp) as f64 - f(&xm) as f64) / (2.0 * eps as f64)) as f32;
        }
        out
    }

    fn check(name: &str, analytic: &Tensor, numeric: &Tensor, tol: f32) {
        let scale = numeric.data().iter().map(|v| v.abs()).fold(1.0f32, f32::max);
        let err = analytic.max_abs_diff(numeric);
        assert!(err <= tol * scale, "{name}: max abs err {err} (scale {scale})");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q0 = rand_tensor(&mut rng, 7, 8);
        let k0 = rand_tensor(&mut rng, 9, 8);
        let v0 = rand_tensor(&mut rng, 9, 4);
        let w = rand_tensor(&mut rng, 7, 4);
        for mask in [Mask::None, Mask::Causal, Mask::QueryPrefix(2), Mask::CausalRecency] {
            let spec = Arc::new(AttentionSpec {
                heads: 2,
                segments: vec![
                    Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 4 },
                    Segment { q_start: 3, q_len: 4, k_start: 4, k_len: 5 },
                ],
                mask,
            });
            let forward = |q: &Tensor, k: &Tensor, v: &Tensor| -> f32 {
                let mut g = Graph::new();
                let (q, k, v) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
                let o = g.attention(q, k, v, spec.clone()).unwrap();
                let wv = g.constant(w.clone());
                let m = g.mul(o, wv).unwrap();
                let s = g.sum(m);
                g.value(s).item()
            };
            let mut g = Graph::new();
            let (q, k, v) = (g.leaf(q0.clone()), g.leaf(k0.clone()), g.leaf(v0.clone()));
            let o = g.attention(q, k, v, spec.clone()).unwrap();
            let wv = g.constant(w.clone());
            let m = g.mul(o, wv).unwrap();
            let s = g.sum(m);
            let grads = g.backward(s).unwrap();
            check("dq", grads.wrt(q).unwrap(), &finite_diff(&q0, &|t| forward(t, &k0, &v0)), 2e-2);
            check("dk", grads.wrt(k).unwrap(), &finite_diff(&k0, &|t| forward(&q0, t, &v0)), 2e-2);
            check("dv", grads.wrt(v).unwrap(), &finite_diff(&v0, &|t| forward(&q0, &k0, t)), 2e-2);
        }
    }

    #[test]
    fn layer_norm_gelu_matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, 4, 6);
        let w0 = rand_tensor(&mut rng, 6, 3);
        let g0 = rand_tensor(&mut rng, 1, 6);
        let b0 = rand_tensor(&mut rng, 1, 6);
        let run = |x: &Tensor, w: &Tensor, gm: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let gv = g.leaf(gm.clone());
            let bv = g.constant(b0.clone());
            let ln = g.layer_norm(xv, gv, bv).unwrap();
            let a = g.gelu(ln);
            let y = g.matmul(a, wv).unwrap();
            let n = g.row_normalize(y);
            let idx = g.gather_rows(n, vec![0, 2, 2, 3]).unwrap();
            let c = g.concat_rows(&[idx, y]).unwrap();
            let s = g.sum(c);
            (g, xv, wv, gv, s)
        };
        let (g, xv, wv, gv, s) = run(&x0, &w0, &g0);
        let grads = g.backward(s).unwrap();
        let val = |x: &Tensor, w: &Tensor, gm: &Tensor| {
            let (g, _, _, _, s) = run(x, w, gm);
            g.value(s).item()
        };
        check("dx", grads.wrt(xv).unwrap(), &finite_diff(&x0, &|t| val(t, &w0, &g0)), 2e-2);
        check("dw", grads.wrt(wv).unwrap(), &finite_diff(&w0, &|t| val(&x0, t, &g0)), 2e-2);
        check("dgamma", grads.wrt(gv).unwrap(), &finite_diff(&g0, &|t| val(&x0, &w0, t)), 2e-2);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", crate::params::Group::Backbone, Tensor::filled(2, 2, 0.5));
        let p = store.add("p", crate::params::Group::PromptTokens, Tensor::filled(1, 2, 1.0));
        store.set_frozen(crate::params::Group::Backbone, true);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let pv = g.param(&store, p);
        let y = g.matmul(pv, wv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param(w).is_none());
        assert!(grads.param(p).is_some());
    }

    #[test]
    fn causal_mask_blocks_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, 6, 4);
        let spec = Arc::new(AttentionSpec {
            heads: 1,
            segments: vec![Segment::square(0, 6)],
            mask: Mask::Causal,
        });
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let o = g.attention(v, v, v, spec.clone()).unwrap();
            g.value(o).clone()
        };
        let base = run(&x);
        let mut x2 = x.clone();
        x2.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
        let pert = run(&x2);
        for r in 0..4 {
            assert_eq!(base.row(r), pert.row(r));
        }
        assert_ne!(base.row(4), pert.row(4));
    }
}
