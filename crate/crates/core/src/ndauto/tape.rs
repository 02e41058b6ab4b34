//! Reverse-mode differentiation over coarse array primitives.
//!
//! Every primitive records its inputs (and whatever it needs for the adjoint)
//! on a linear [`Tape`]. Nodes are appended in evaluation order, so the node
//! list is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use std::cell::Cell;

use super::array::Array;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Vec<f64>,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape(NodeId),
    Expand {
        x: NodeId,
        axis: usize,
    },
    Upsample2(NodeId),
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Mse {
        x: NodeId,
        target: Array,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoint_visits: Cell<usize>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when the node was not reached.
    pub fn get(&self, id: NodeId) -> Array {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[id]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Array {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[id]))
    }
}

/// Splits a shape around `axis` into (outer, dim, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Batch view of a rank-2 or rank-3 `[B?, C, T]` shape.
fn bct(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::dim(
            op,
            format!("expected [C, T] or [B, C, T], got {shape:?}"),
        )),
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

    /// Number of non-leaf nodes recorded.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Adjoint evaluations performed by the most recent backward sweep.
    pub fn adjoint_visits(&self) -> usize {
        self.adjoint_visits.get()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Array) -> NodeId {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Array) -> NodeId {
        self.leaf(value.with_grad(true))
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value.with_grad(false))
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Cross-correlation of `[B, C_in, T]` (or `[C_in, T]`) with
    /// `[C_out, C_in, K]` plus per-channel bias.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (bsz, cin, t) = bct(&xs, "conv1d")?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k] = ws[..] else {
            return Err(Error::dim(
                "conv1d",
                format!("weight must be [C_out, C_in, K], got {ws:?}"),
            ));
        };
        if wcin != cin {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input channels (axis {}) = {cin}, weight axis 1 = {wcin}",
                    xs.len() - 2
                ),
            ));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "bias {:?} does not match C_out = {cout}",
                    self.value(b).shape()
                ),
            ));
        }
        if stride == 0 || t + 2 * padding < k {
            return Err(Error::dim(
                "conv1d",
                format!("kernel {k} too long for length {t}"),
            ));
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            bsz,
            cin,
            t,
            k,
            tout,
            stride,
            padding,
        };
        let cols = geom.im2col(self.value(x).data());
        let bd = self.value(b).data();
        let ncol = bsz * tout;
        let mut prod = vec![0.0; cout * ncol];
        gemm(
            cout,
            cin * k,
            ncol,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut prod,
        );
        let mut out = vec![0.0; bsz * cout * tout];
        for co in 0..cout {
            for bi in 0..bsz {
                let src = &prod[co * ncol + bi * tout..][..tout];
                for (o, v) in out[(bi * cout + co) * tout..][..tout].iter_mut().zip(src) {
                    *o = v + bd[co];
                }
            }
        }
        let oshape = if xs.len() == 2 {
            vec![cout, tout]
        } else {
            vec![bsz, cout, tout]
        };
        let v = Array::new(&oshape, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Row-wise affine map: `[..., D_in] -> [..., D_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [dout, din] = ws[..] else {
            return Err(Error::dim(
                "linear",
                format!("weight must be [D_out, D_in], got {ws:?}"),
            ));
        };
        let xin = *xs.last().unwrap();
        if xin != din {
            return Err(Error::dim(
                "linear",
                format!("input axis {} = {xin}, weight axis 1 = {din}", xs.len() - 1),
            ));
        }
        if self.value(b).shape() != [dout] {
            return Err(Error::dim(
                "linear",
                format!(
                    "bias {:?} does not match D_out = {dout}",
                    self.value(b).shape()
                ),
            ));
        }
        let n = self.value(x).len() / din;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out: Vec<f64> = (0..n * dout).map(|i| bd[i % dout]).collect();
        gemm_acc(n, din, dout, xd, false, wd, true, &mut out);
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let v = Array::new(&oshape, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Group normalization over `[B, C, T]` (or `[C, T]`) with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (bsz, c, t) = bct(&xs, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::dim(
                    "group_norm",
                    format!("{name} {:?} does not match C = {c}", self.value(id).shape()),
                ));
            }
        }
        let cg = c / groups;
        let span = cg * t;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; bsz * groups];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for g in 0..groups {
                let off = (bi * c + g * cg) * t;
                let seg = &xd[off..off + span];
                let mean = seg.iter().sum::<f64>() / span as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[bi * groups + g] = r;
                for j in 0..span {
                    let ch = g * cg + j / t;
                    let h = (seg[j] - mean) * r;
                    xhat[off + j] = h;
                    out[off + j] = h * gd[ch] + bd[ch];
                }
            }
        }
        let v = Array::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis, built on [`Tape::group_norm`].
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().unwrap();
        let rows = self.value(x).len() / d;
        let r = self.reshape(x, &[rows, d, 1])?;
        let n = self.group_norm(r, 1, gamma, beta, eps)?;
        self.reshape(n, &xs)
    }

    /// Full softmax attention `softmax(q kᵀ / sqrt(D)) v` over `[N, T, D]` (or `[T, D]`).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let qs = self.value(q).shape().to_vec();
        for id in [k, v] {
            if self.value(id).shape() != qs.as_slice() {
                return Err(Error::dim(
                    "attention",
                    format!("{:?} vs {:?}", qs, self.value(id).shape()),
                ));
            }
        }
        let (n, t, d) = bct(&qs, "attention")?;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; n * t * t];
        let mut out = vec![0.0; n * t * d];
        for b in 0..n {
            let base = b * t * d;
            for i in 0..t {
                let qi = &qd[base + i * d..][..d];
                let prow = &mut probs[(b * t + i) * t..][..t];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..t {
                    let kj = &kd[base + j * d..][..d];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    if !s.is_finite() {
                        return Err(Error::Numeric(format!(
                            "attention logit ({i}, {j}) in batch {b} is {s}"
                        )));
                    }
                    prow[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for p in prow.iter_mut() {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                let orow = &mut out[base + i * d..][..d];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p /= z;
                    let vj = &vd[base + j * d..][..d];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += *p * vv;
                    }
                }
            }
        }
        let val = Array::new(&qs, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(val, Op::Attention { q, k, v, probs }, rg))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len()
            || axes
                .iter()
                .any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(
                "permute",
                format!("axes {axes:?} invalid for {xs:?}"),
            ));
        }
        let v = permute_array(self.value(x), axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?.with_grad(false);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || xs[axis] != 1 || n == 0 {
            return Err(Error::dim(
                "expand",
                format!("axis {axis} of {xs:?} must have size 1"),
            ));
        }
        let (outer, _, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xd[o * inner..][..inner]);
            }
        }
        let mut oshape = xs.clone();
        oshape[axis] = n;
        let v = Array::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Expand { x, axis }, rg))
    }

    /// Nearest-neighbour doubling of the last axis.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() *= 2;
        let v = Array::new(
            &oshape,
            self.value(x).data().iter().flat_map(|&a| [a, a]).collect(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Upsample2(x), rg))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &id in xs {
            let s = self.value(id).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} vs {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let d = self.value(id).shape()[axis];
                out.extend_from_slice(&self.value(id).data()[o * d * inner..][..d * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let v = Array::new(&oshape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) outside axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, d, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * d + start) * inner..][..len * inner]);
        }
        let mut oshape = xs;
        oshape[axis] = len;
        let v = Array::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let a = self.value(x);
        let v = Array::scalar(a.sum() / a.len() as f64);
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: NodeId, target: Array) -> Result<NodeId> {
        let a = self.value(x);
        if a.shape() != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("{:?} vs {:?}", a.shape(), target.shape()),
            ));
        }
        let s: f64 = a
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let v = Array::scalar(s / a.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Mse { x, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every op node that receives an
    /// adjoint is visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {loss} has shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(Array::scalar(1.0));
        let mut visits = 0;
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visits += 1;
            self.propagate(id, &g, &mut grads)?;
        }
        self.adjoint_visits.set(visits);
        // Only leaves that asked for gradients keep them.
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], id: NodeId, g: Array) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: NodeId, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))?;
                self.accumulate(grads, *a, d);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv1d_backward(g, *x, *w, *b, *stride, *padding, grads)?,
            Op::Linear { x, w, b } => self.linear_backward(g, *x, *w, *b, grads)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => self.group_norm_backward(g, *x, *gamma, *beta, *groups, xhat, rstd, grads)?,
            Op::Attention { q, k, v, probs } => {
                self.attention_backward(g, *q, *k, *v, probs, grads)?
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, permute_array(g, &inv));
            }
            Op::Reshape(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.reshape(self.value(*x).shape())?.with_grad(false),
                );
            }
            Op::Expand { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g.data()[(o * n + r) * inner..][..inner];
                        for (acc, s) in d[o * inner..][..inner].iter_mut().zip(src) {
                            *acc += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(self.value(*x).shape(), d)?);
            }
            Op::Upsample2(x) => {
                let d = g.data().chunks_exact(2).map(|p| p[0] + p[1]).collect();
                self.accumulate(grads, *x, Array::new(self.value(*x).shape(), d)?);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut off = 0;
                for &src in xs {
                    let d = self.value(src).shape()[*axis];
                    if self.needs(src) {
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            part.extend_from_slice(
                                &g.data()[(o * total + off) * inner..][..d * inner],
                            );
                        }
                        self.accumulate(grads, src, Array::new(self.value(src).shape(), part)?);
                    }
                    off += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, d, inner) = split_axis(xs, *axis);
                let len = out.shape()[*axis];
                let mut full = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    full[(o * d + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *x, Array::new(xs, full)?);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Array::full(self.value(*x).shape(), s));
            }
            Op::Mean(x) => {
                let a = self.value(*x);
                self.accumulate(grads, *x, Array::full(a.shape(), g.item() / a.len() as f64));
            }
            Op::Mse { x, target } => {
                let a = self.value(*x);
                let c = 2.0 * g.item() / a.len() as f64;
                self.accumulate(grads, *x, a.zip_map(target, |p, q| c * (p - q))?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        g: &Array,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        grads: &mut [Option<Array>],
    ) -> Result<()> {
        let (bsz, cin, t) = bct(self.value(x).shape(), "conv1d")?;
        let ws = self.value(w).shape();
        let (cout, k) = (ws[0], ws[2]);
        let tout = g.shape()[g.ndim() - 1];
        let geom = ConvGeom {
            bsz,
            cin,
            t,
            k,
            tout,
            stride,
            padding,
        };
        let gd = g.data();
        let ncol = bsz * tout;
        // gradient rearranged to [C_out, B·T_out]
        let mut gm = vec![0.0; cout * ncol];
        let mut db = vec![0.0; cout];
        for bi in 0..bsz {
            for co in 0..cout {
                let src = &gd[(bi * cout + co) * tout..][..tout];
                gm[co * ncol + bi * tout..][..tout].copy_from_slice(src);
                db[co] += src.iter().sum::<f64>();
            }
        }
        let cols = geom.im2col(self.value(x).data());
        let mut dw = vec![0.0; cout * cin * k];
        gemm(cout, ncol, cin * k, &gm, false, &cols, true, &mut dw);
        if self.needs(x) {
            let mut dcols = vec![0.0; cin * k * ncol];
            gemm(
                cin * k,
                cout,
                ncol,
                self.value(w).data(),
                true,
                &gm,
                false,
                &mut dcols,
            );
            self.accumulate(
                grads,
                x,
                Array::new(self.value(x).shape(), geom.col2im(&dcols))?,
            );
        }
        self.accumulate(grads, w, Array::new(ws, dw)?);
        self.accumulate(grads, b, Array::new(&[cout], db)?);
        Ok(())
    }

    fn linear_backward(
        &self,
        g: &Array,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        grads: &mut [Option<Array>],
    ) -> Result<()> {
        let ws = self.value(w).shape();
        let (dout, din) = (ws[0], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let gd = g.data();
        let n = xd.len() / din;
        if self.needs(x) {
            let mut dx = vec![0.0; xd.len()];
            gemm(n, dout, din, gd, false, wd, false, &mut dx);
            self.accumulate(grads, x, Array::new(self.value(x).shape(), dx)?);
        }
        if self.needs(w) || self.needs(b) {
            let mut dw = vec![0.0; wd.len()];
            gemm(dout, n, din, gd, true, xd, false, &mut dw);
            let mut db = vec![0.0; dout];
            for row in gd.chunks_exact(dout) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.accumulate(grads, w, Array::new(ws, dw)?);
            self.accumulate(grads, b, Array::new(&[dout], db)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        g: &Array,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: &[f64],
        rstd: &[f64],
        grads: &mut [Option<Array>],
    ) -> Result<()> {
        let (bsz, c, t) = bct(self.value(x).shape(), "group_norm")?;
        let cg = c / groups;
        let span = cg * t;
        let gd = g.data();
        let gam = self.value(gamma).data();
        let mut dx = vec![0.0; gd.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..bsz {
            for gr in 0..groups {
                let off = (bi * c + gr * cg) * t;
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..span {
                    let ch = gr * cg + j / t;
                    let dh = gd[off + j] * gam[ch];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat[off + j];
                    dgamma[ch] += gd[off + j] * xhat[off + j];
                    dbeta[ch] += gd[off + j];
                }
                let r = rstd[bi * groups + gr];
                let nf = span as f64;
                for j in 0..span {
                    let ch = gr * cg + j / t;
                    let dh = gd[off + j] * gam[ch];
                    dx[off + j] = r / nf * (nf * dh - sum_dh - xhat[off + j] * sum_dh_h);
                }
            }
        }
        self.accumulate(grads, x, Array::new(self.value(x).shape(), dx)?);
        self.accumulate(grads, gamma, Array::new(&[c], dgamma)?);
        self.accumulate(grads, beta, Array::new(&[c], dbeta)?);
        Ok(())
    }

    fn attention_backward(
        &self,
        g: &Array,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: &[f64],
        grads: &mut [Option<Array>],
    ) -> Result<()> {
        let shape = self.value(q).shape();
        let (n, t, d) = bct(shape, "attention")?;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let gd = g.data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; t];
        for b in 0..n {
            let base = b * t * d;
            for i in 0..t {
                let prow = &probs[(b * t + i) * t..][..t];
                let gi = &gd[base + i * d..][..d];
                for j in 0..t {
                    let vj = &vd[base + j * d..][..d];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    for (acc, gv) in dv[base + j * d..][..d].iter_mut().zip(gi) {
                        *acc += prow[j] * gv;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(p, q)| p * q).sum();
                for j in 0..t {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        dq[base + i * d + c] += ds * kd[base + j * d + c];
                        dk[base + j * d + c] += ds * qd[base + i * d + c];
                    }
                }
            }
        }
        self.accumulate(grads, q, Array::new(shape, dq)?);
        self.accumulate(grads, k, Array::new(shape, dk)?);
        self.accumulate(grads, v, Array::new(shape, dv)?);
        Ok(())
    }
}

/// Output index range `[lo, hi)` for which tap `kk` reads inside the input.
/// `c = op(a) · op(b)` for row-major `a` (`m×k` after `op`) and `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    gemm_beta(m, k, n, a, ta, b, tb, 0.0, c);
}

/// `c += op(a) · op(b)`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    gemm_beta(m, k, n, a, ta, b, tb, 1.0, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    bsz: usize,
    cin: usize,
    t: usize,
    k: usize,
    tout: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// `[C_in·K, B·T_out]` patch matrix (zero where the kernel overhangs).
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ncol = self.bsz * self.tout;
        let mut cols = vec![0.0; self.cin * self.k * ncol];
        for ci in 0..self.cin {
            for kk in 0..self.k {
                let (lo, hi) = conv_range(self.t, self.tout, kk, self.stride, self.padding);
                let row = &mut cols[(ci * self.k + kk) * ncol..][..ncol];
                for bi in 0..self.bsz {
                    let xrow = &x[(bi * self.cin + ci) * self.t..][..self.t];
                    let dst = &mut row[bi * self.tout..][..self.tout];
                    for to in lo..hi {
                        dst[to] = xrow[to * self.stride + kk - self.padding];
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto `[B, C_in, T]`.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let ncol = self.bsz * self.tout;
        let mut dx = vec![0.0; self.bsz * self.cin * self.t];
        for ci in 0..self.cin {
            for kk in 0..self.k {
                let (lo, hi) = conv_range(self.t, self.tout, kk, self.stride, self.padding);
                let row = &cols[(ci * self.k + kk) * ncol..][..ncol];
                for bi in 0..self.bsz {
                    let dxrow = &mut dx[(bi * self.cin + ci) * self.t..][..self.t];
                    let src = &row[bi * self.tout..][..self.tout];
                    for to in lo..hi {
                        dxrow[to * self.stride + kk - self.padding] += src[to];
                    }
                }
            }
        }
        dx
    }
}

fn conv_range(t: usize, tout: usize, kk: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kk >= padding {
        0
    } else {
        (padding - kk).div_ceil(stride)
    };
    let hi = if t + padding > kk {
        ((t - 1 + padding - kk) / stride + 1).min(tout)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn permute_array(a: &Array, axes: &[usize]) -> Array {
    let shape = a.shape();
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let ostrides: Vec<usize> = axes.iter().map(|&ax| strides[ax]).collect();
    let data = a.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&ostrides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Array::new(&oshape, out).expect("permutation preserves size")
}
