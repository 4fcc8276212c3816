//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes only ever refer
//! to earlier nodes, so the tape is acyclic by construction and the backward
//! sweep is a single pass in reverse recording order.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttnDims};
use crate::numerics::tensor::{check_finite, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b` where `b`'s shape is a suffix of `x`'s.
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Silu {
        x: Var,
        sig: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatLast(Var, Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    GatedResidual {
        z: Var,
        gate: Var,
        update: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    MaskColumns {
        x: Var,
        dims: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by the parameter handles passed to [`Graph::grad_of`].
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        // Nothing upstream needs gradients, so the op's saved state is dead weight.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s)?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// `x + b`, with `b` repeated over the leading axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", xs, bs));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, v) in chunk.iter_mut().zip(bv) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(xs.to_vec(), out);
        self.push("add_broadcast", value, Op::AddBroadcast(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if c < 2 {
            return Err(Error::DegenerateAxis {
                op: "layer_norm",
                extent: c,
            });
        }
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows()];
        kernels::layer_norm(xv.data(), c, eps, &mut out, &mut inv_std);
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows()?;
        self.push("softmax_rows", value, Op::SoftmaxRows(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sig: Vec<f64> = xv.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let out = xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let value = Tensor::checked("silu", xv.shape().to_vec(), out)?;
        self.push("silu", value, Op::Silu { x, sig }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / p.len() as f64);
        self.push("mse", value, Op::Mse(pred, target), &[pred, target])
    }

    /// Rows of a `[vocab, width]` table selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("gather_rows", tv.shape(), &[0, 0]));
        }
        let (vocab, width) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::DimensionOutOfRange {
                    dim: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), width], out);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", sa, sb));
        }
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::from_parts(shape, out);
        self.push("concat_last", value, Op::ConcatLast(a, b), &[a, b])
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_last", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_parts(shape, out);
        self.push("slice_last", value, Op::SliceLast { x, start }, &[x])
    }

    fn per_sample_shapes(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        if xs.len() != 3 || vs != [xs[0], xs[2]] {
            return Err(Error::shape(op, xs, vs));
        }
        Ok((xs[0], xs[1], xs[2]))
    }

    /// `x * (1 + scale) + shift` for `x: [B, T, C]`, `scale, shift: [B, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, t, c) = self.per_sample_shapes("modulate", x, scale)?;
        self.per_sample_shapes("modulate", x, shift)?;
        let (xv, sv, hv) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            let (s, h) = (&sv[bi * c..][..c], &hv[bi * c..][..c]);
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for d in 0..c {
                    out[o + d] = (1.0 + s[d]) * xv[o + d] + h[d];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, t, c], out);
        self.push(
            "modulate",
            value,
            Op::Modulate { x, scale, shift },
            &[x, scale, shift],
        )
    }

    /// `z + gate * update` for `z, update: [B, T, C]`, `gate: [B, C]`.
    pub fn gated_residual(&mut self, z: Var, gate: Var, update: Var) -> Result<Var> {
        let (b, t, c) = self.per_sample_shapes("gated_residual", z, gate)?;
        self.same_shape("gated_residual", z, update)?;
        let (zv, gv, uv) = (
            self.value(z).data(),
            self.value(gate).data(),
            self.value(update).data(),
        );
        let mut out = vec![0.0; zv.len()];
        for bi in 0..b {
            let g = &gv[bi * c..][..c];
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for d in 0..c {
                    out[o + d] = zv[o + d] + g[d] * uv[o + d];
                }
            }
        }
        let value = Tensor::from_parts(vec![b, t, c], out);
        self.push(
            "gated_residual",
            value,
            Op::GatedResidual { z, gate, update },
            &[z, gate, update],
        )
    }

    /// Multi-head scaled dot-product attention over `[B, T, C]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(Error::shape("attention", &shape, &[heads]));
        }
        let dims = AttnDims {
            batch: shape[0],
            tokens: shape[1],
            width: shape[2],
            heads,
        };
        let mut out = vec![0.0; self.value(q).len()];
        let mut probs = vec![0.0; dims.batch * heads * dims.tokens * dims.tokens];
        kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            &mut out,
            &mut probs,
        );
        let value = Tensor::from_parts(shape, out);
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Zeroes the listed last-axis columns; all other entries pass through untouched.
    pub fn mask_columns(&mut self, x: Var, dims: &BTreeSet<usize>) -> Result<Var> {
        let value = super::mask_columns(self.value(x), dims)?;
        let op = Op::MaskColumns {
            x,
            dims: dims.iter().copied().collect(),
        };
        self.push("mask_columns", value, op, &[x])
    }

    /// Reverse-mode gradients of scalar `loss` with respect to `params`.
    /// Parameters the loss does not reach get zero gradients.
    pub fn grad_of(&self, loss: Var, params: &[Var]) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut out = HashMap::with_capacity(params.len());
        for &p in params {
            let shape = self.shape(p).to_vec();
            let data = grads
                .get_mut(p.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            out.insert(p, Tensor::checked("grad_of", shape, data)?);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily zero-initialized accumulator for input `v`, or None if it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(gb, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc!(*a) {
                    axpy(ga, *s, g);
                }
            }
            Op::AddBroadcast(x, b) => {
                if let Some(gx) = acc!(*x) {
                    axpy(gx, 1.0, g);
                }
                if let Some(gb) = acc!(*b) {
                    let n = gb.len();
                    for chunk in g.chunks_exact(n) {
                        axpy(gb, 1.0, chunk);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (at.rows(), at.last_dim());
                let n = bt.shape()[1];
                let (av, bv) = (at.data(), bt.data());
                if let Some(ga) = acc!(*a) {
                    kernels::gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = acc!(*b) {
                    kernels::gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    kernels::layer_norm_backward(node.value.data(), g, inv_std, c, gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    kernels::softmax_rows_backward(node.value.data(), g, n, gx);
                }
            }
            Op::Silu { x, sig } => {
                let xv = val(*x);
                if let Some(gx) = acc!(*x) {
                    for (((d, gi), xi), s) in gx.iter_mut().zip(g).zip(xv).zip(sig) {
                        *d += gi * s * (1.0 + xi * (1.0 - s));
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let k = 2.0 * g[0] / pv.len() as f64;
                if let Some(gp) = acc!(*p) {
                    for ((d, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *d += k * (a - b);
                    }
                }
                if let Some(gt) = acc!(*t) {
                    for ((d, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *d -= k * (a - b);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let w = node.value.last_dim();
                if let Some(gt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * w..(id + 1) * w], 1.0, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (nodes[a.0].value.last_dim(), nodes[b.0].value.last_dim());
                let c = ca + cb;
                if let Some(ga) = acc!(*a) {
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(c)) {
                        axpy(dst, 1.0, &src[..ca]);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(c)) {
                        axpy(dst, 1.0, &src[ca..]);
                    }
                }
            }
            Op::SliceLast { x, start } => {
                let c = nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        axpy(&mut dst[*start..start + len], 1.0, src);
                    }
                }
            }
            Op::Modulate { x, scale, shift } => {
                let s = nodes[x.0].value.shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let (xv, sv) = (val(*x), val(*scale));
                if let Some(gx) = acc!(*x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * c;
                            for d in 0..c {
                                gx[o + d] += g[o + d] * (1.0 + sv[bi * c + d]);
                            }
                        }
                    }
                }
                if let Some(gs) = acc!(*scale) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * c;
                            for d in 0..c {
                                gs[bi * c + d] += g[o + d] * xv[o + d];
                            }
                        }
                    }
                }
                if let Some(gh) = acc!(*shift) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * c;
                            axpy(&mut gh[bi * c..(bi + 1) * c], 1.0, &g[o..o + c]);
                        }
                    }
                }
            }
            Op::GatedResidual { z, gate, update } => {
                let s = nodes[z.0].value.shape();
                let (b, t, c) = (s[0], s[1], s[2]);
                let (gv, uv) = (val(*gate), val(*update));
                if let Some(gz) = acc!(*z) {
                    axpy(gz, 1.0, g);
                }
                if let Some(gg) = acc!(*gate) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * c;
                            for d in 0..c {
                                gg[bi * c + d] += g[o + d] * uv[o + d];
                            }
                        }
                    }
                }
                if let Some(gu) = acc!(*update) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * c;
                            for d in 0..c {
                                gu[o + d] += g[o + d] * gv[bi * c + d];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let n = node.value.len();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    *dims,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = acc!(var) {
                        axpy(acc, 1.0, &d);
                    }
                }
            }
            Op::MaskColumns { x, dims } => {
                let c = node.value.last_dim();
                if let Some(gx) = acc!(*x) {
                    for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for (d, (o, s)) in dst.iter_mut().zip(src).enumerate() {
                            if dims.binary_search(&d).is_err() {
                                *o += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.grad_of(y, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 1.5));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 2.0).unwrap();
        let grads = g.grad_of(loss, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.grad_of(x, &[x]), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn reused_input_accumulates() {
        // d/dx sum(x + x) = 2
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3], 0.7));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.grad_of(s, &[x]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_subgraph_records_no_backward_state() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 2], 1.0));
        let b = g.matmul(a, a).unwrap();
        assert!(matches!(g.nodes[b.0].op, Op::Leaf));
        assert!(!g.rg(b));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[4], 2.0));
        let b = g.constant(Tensor::full(&[4], 2.0));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
