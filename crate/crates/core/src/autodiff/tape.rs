//! Wengert-tape reverse-mode autodiff over dense f64 arrays.
//!
//! Operations append nodes to a linear tape during the forward pass; the tape
//! is acyclic and topologically ordered by creation, so `backward` is a single
//! reverse sweep. Every op validates shapes and rejects non-finite outputs.
//! A tape with recording disabled evaluates the same arithmetic without
//! keeping backward metadata, which is what rollout inference uses.

use std::sync::Arc;

use crate::{Error, Result};

use super::array::{axpy, dot, matmul_acc, matmul_ta_acc, matmul_tb_acc, Array};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRows(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    MatmulTb(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Permute {
        x: NodeId,
        perm: Arc<Vec<usize>>,
    },
    MaxPoolSpatial(NodeId),
    MeanPoolSpatial(NodeId),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    recording: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates values only; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes but keep allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Array> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Gradient of the last `backward` root with respect to `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Arc<Array>, requires_grad: bool) -> NodeId {
        self.push_unchecked(value, Op::Leaf, requires_grad && self.recording)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push_unchecked(Arc::new(value), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    fn push_unchecked(&mut self, value: Arc<Array>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let keep_grad = needs_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: if self.recording { op } else { Op::Leaf },
            needs_grad: keep_grad,
        });
        self.grads.push(None);
        id
    }

    fn push(&mut self, value: Array, op: Op, parents: &[NodeId], opname: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(opname.to_string()));
        }
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(Arc::new(value), op, needs))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, opname: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{opname}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div")?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o /= x;
        }
        self.push(out, Op::Div(a, b), &[a, b], "div")
    }

    /// Elementwise min; the smaller branch receives the gradient (ties go to `a`).
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "minimum")?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            if *x < *o {
                *o = *x;
            }
        }
        self.push(out, Op::Minimum(a, b), &[a, b], "minimum")
    }

    /// Clamp to [lo, hi]; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.clamp(lo, hi);
        }
        self.push(out, Op::Clamp(a, lo, hi), &[a], "clamp")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += c;
        }
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// `[M,N] + [N]` broadcast over rows.
    pub fn add_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(v).len() != n {
            return Err(Error::Shape(format!(
                "add_rows: {:?} + {:?}",
                self.value(a).shape(),
                self.value(v).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, x) in row.iter_mut().zip(vv.iter()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRows(a, v), &[a, v], "add_rows")
    }

    /// `[M,N] * [N]` broadcast over rows.
    pub fn mul_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(v).len() != n {
            return Err(Error::Shape(format!(
                "mul_rows: {:?} * {:?}",
                self.value(a).shape(),
                self.value(v).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, x) in row.iter_mut().zip(vv.iter()) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRows(a, v), &[a, v], "mul_rows")
    }

    // ---- unary nonlinearities ----

    fn unary(
        &mut self,
        a: NodeId,
        opname: &str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        self.push(out, op, &[a], opname)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "sigmoid", Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "tanh", Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "silu", Op::Silu(a), |x| x * sigmoid_scalar(x))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "gelu", Op::Gelu(a), gelu_scalar)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "softplus", Op::Softplus(a), softplus_scalar)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "log", Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", Op::Exp(a), f64::exp)
    }

    // ---- matmul ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} @ {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Array::zeros(&[m, n]);
        matmul_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        self.push(out, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// `a[M,K] @ b[N,K]^T -> [M,N]`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::Shape(format!(
                "matmul_tb: {:?} @ {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = Array::zeros(&[m, n]);
        matmul_tb_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        self.push(out, Op::MatmulTb(a, b), &[a, b], "matmul_tb")
    }

    // ---- row-wise normalizations ----

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Per-row standardization (zero mean, unit variance); no affine part.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.value(a).cols();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps), &[a], "layer_norm_rows")
    }

    /// GroupNorm over a `[C,H,W]` tensor with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::Shape(format!("group_norm: {:?}", xv.shape())));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if c % groups != 0 || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!(
                "group_norm: C={c} groups={groups} gamma={:?} beta={:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let spatial = h * w;
        let per = (c / groups) * spatial;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for g in 0..groups {
            let seg = &mut out.data_mut()[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in seg.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        for ch in 0..c {
            let seg = &mut out.data_mut()[ch * spatial..(ch + 1) * spatial];
            for v in seg.iter_mut() {
                *v = *v * gv[ch] + bv[ch];
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            &[x, gamma, beta],
            "group_norm",
        )
    }

    // ---- convolution ----

    /// Strided 2-D convolution: x `[Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 3 || wv.shape().len() != 4 || xv.shape()[0] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "conv2d: x {:?} w {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (cin, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if self.value(b).len() != cout {
            return Err(Error::Shape("conv2d: bias".into()));
        }
        if h + 2 * pad < kh || win + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: input {h}x{win} smaller than kernel {kh}x{kw} with pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;
        let mut out = Array::zeros(&[cout, ho, wo]);
        let xd = xv.data();
        let wd = wv.data();
        let bd = self.value(b).data();
        {
            let od = out.data_mut();
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    acc += xd[ci * h * win + iy as usize * win + ix as usize]
                                        * wd[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        od[(co * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Conv2d { x, w, b, stride, pad },
            &[x, w, b],
            "conv2d",
        )
    }

    // ---- reductions and pooling ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// `[C,H,W] -> [C]` max over the spatial plane.
    pub fn max_pool_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 3 {
            return Err(Error::Shape(format!("max_pool_spatial: {:?}", v.shape())));
        }
        let (c, sp) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
        let mut out = Array::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = v.data()[ch * sp..(ch + 1) * sp]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
        }
        self.push(out, Op::MaxPoolSpatial(a), &[a], "max_pool_spatial")
    }

    /// `[C,H,W] -> [C]` mean over the spatial plane.
    pub fn mean_pool_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 3 {
            return Err(Error::Shape(format!("mean_pool_spatial: {:?}", v.shape())));
        }
        let (c, sp) = (v.shape()[0], v.shape()[1] * v.shape()[2]);
        let mut out = Array::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = v.data()[ch * sp..(ch + 1) * sp].iter().sum::<f64>() / sp as f64;
        }
        self.push(out, Op::MeanPoolSpatial(a), &[a], "mean_pool_spatial")
    }

    // ---- structural ----

    /// Concatenate 2-D arrays along `axis` (0 = stack rows, 1 = widen rows).
    /// 1-D arrays are treated as single rows for axis 1 concatenation.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: empty".into()));
        }
        let out = match axis {
            0 => {
                let cols = self.value(parts[0]).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let v = self.value(*p);
                    if v.cols() != cols {
                        return Err(Error::Shape("concat axis0: column mismatch".into()));
                    }
                    rows += v.len() / cols;
                    data.extend_from_slice(v.data());
                }
                Array::from_vec(&[rows, cols], data)?
            }
            1 => {
                let rows = if self.value(parts[0]).shape().len() == 1 {
                    1
                } else {
                    self.value(parts[0]).rows()
                };
                for p in parts {
                    let v = self.value(*p);
                    let r = if v.shape().len() == 1 { 1 } else { v.rows() };
                    if r != rows {
                        return Err(Error::Shape("concat axis1: row mismatch".into()));
                    }
                }
                let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for p in parts {
                    let v = self.value(*p);
                    let c = v.cols();
                    for r in 0..rows {
                        data[r * total + off..r * total + off + c]
                            .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
                    }
                    off += c;
                }
                if rows == 1 && parts.iter().all(|p| self.value(*p).shape().len() == 1) {
                    Array::from_vec(&[total], data)?
                } else {
                    Array::from_vec(&[rows, total], data)?
                }
            }
            _ => return Err(Error::Shape("concat: axis must be 0 or 1".into())),
        };
        self.push(
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
            "concat",
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let cols = v.cols();
        let rows = v.len() / cols;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: [{start},{}) of {rows}",
                start + len
            )));
        }
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let out = Array::from_vec(&[len, cols], data)?;
        self.push(out, Op::SliceRows { x: a, start }, &[a], "slice_rows")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let cols = v.cols();
        let rows = v.len() / cols;
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols: [{start},{}) of {cols}",
                start + len
            )));
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Array::from_vec(&[rows, len], data)?;
        self.push(out, Op::SliceCols { x: a, start }, &[a], "slice_cols")
    }

    /// Row gather / embedding lookup; rows may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(a);
        let cols = v.cols();
        let rows = v.len() / cols;
        let mut data = vec![0.0; idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Shape(format!("gather_rows: index {i} of {rows}")));
            }
            data[r * cols..(r + 1) * cols].copy_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let out = Array::from_vec(&[idx.len(), cols], data)?;
        self.push(out, Op::GatherRows { x: a, idx }, &[a], "gather_rows")
    }

    /// Element permutation: `out.data[i] = x.data[perm[i]]`, reshaped to `out_shape`.
    /// `perm` must be a bijection over the elements of `x`.
    pub fn permute(&mut self, a: NodeId, perm: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let n: usize = out_shape.iter().product();
        if perm.len() != n || n != v.len() {
            return Err(Error::Shape(format!(
                "permute: {} indices for {} elements -> {:?}",
                perm.len(),
                v.len(),
                out_shape
            )));
        }
        let mut data = vec![0.0; n];
        for (o, &src) in data.iter_mut().zip(perm.iter()) {
            *o = v.data()[src];
        }
        let out = Array::from_vec(out_shape, data)?;
        self.push(out, Op::Permute { x: a, perm }, &[a], "permute")
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// reachable node with `needs_grad`; read them via [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::Autodiff("backward on an inference tape".into()));
        }
        if self.consumed {
            return Err(Error::Autodiff("tape already consumed by backward".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        self.grads[root.0] = Some(Array::scalar(1.0));
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.propagate(i, &g, &op);
            // keep gradients only where someone will read them
            if self.nodes[i].needs_grad {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn acc_into(&mut self, target: NodeId, update: impl FnOnce(&mut Array)) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        if self.grads[target.0].is_none() {
            self.grads[target.0] = Some(Array::zeros(self.nodes[target.0].value.shape()));
        }
        update(self.grads[target.0].as_mut().unwrap());
    }

    fn propagate(&mut self, node: usize, g: &Array, op: &Op) {
        let id = NodeId(node);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(*a, |ga| axpy(1.0, g.data(), ga.data_mut()));
                self.acc_into(*b, |gb| axpy(1.0, g.data(), gb.data_mut()));
            }
            Op::Sub(a, b) => {
                self.acc_into(*a, |ga| axpy(1.0, g.data(), ga.data_mut()));
                self.acc_into(*b, |gb| axpy(-1.0, g.data(), gb.data_mut()));
            }
            Op::Mul(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                self.acc_into(*a, |ga| {
                    for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                self.acc_into(*b, |gb| {
                    for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                self.acc_into(*a, |ga| {
                    for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi / bi;
                    }
                });
                self.acc_into(*b, |gb| {
                    for (((o, gi), ai), bi) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        *o -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                self.acc_into(*a, |ga| {
                    for (((o, gi), ai), bi) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        if ai <= bi {
                            *o += gi;
                        }
                    }
                });
                self.acc_into(*b, |gb| {
                    for (((o, gi), ai), bi) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(av.data())
                        .zip(bv.data())
                    {
                        if bi < ai {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value_arc(*a);
                let (lo, hi) = (*lo, *hi);
                self.acc_into(*a, |ga| {
                    for ((o, gi), ai) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *ai >= lo && *ai <= hi {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_into(*a, |ga| axpy(c, g.data(), ga.data_mut()));
            }
            Op::AddScalar(a) => {
                self.acc_into(*a, |ga| axpy(1.0, g.data(), ga.data_mut()));
            }
            Op::AddRows(a, v) => {
                let n = self.value(*v).len();
                self.acc_into(*a, |ga| axpy(1.0, g.data(), ga.data_mut()));
                self.acc_into(*v, |gv| {
                    for row in g.data().chunks(n) {
                        axpy(1.0, row, gv.data_mut());
                    }
                });
            }
            Op::MulRows(a, v) => {
                let av = self.value_arc(*a);
                let vv = self.value_arc(*v);
                let n = vv.len();
                self.acc_into(*a, |ga| {
                    for (grow, gprow) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(n)) {
                        for ((o, gi), vi) in grow.iter_mut().zip(gprow).zip(vv.data()) {
                            *o += gi * vi;
                        }
                    }
                });
                self.acc_into(*v, |gv| {
                    for (arow, gprow) in av.data().chunks(n).zip(g.data().chunks(n)) {
                        for ((o, gi), ai) in gv.data_mut().iter_mut().zip(gprow).zip(arow) {
                            *o += gi * ai;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // ga += g @ b^T ; gb += a^T @ g
                self.acc_into(*a, |ga| {
                    matmul_tb_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                });
                self.acc_into(*b, |gb| {
                    matmul_ta_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                });
            }
            Op::MatmulTb(a, b) => {
                let av = self.value_arc(*a);
                let bv = self.value_arc(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                // y = a @ b^T : ga += g @ b ; gb += g^T @ a
                self.acc_into(*a, |ga| {
                    matmul_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                });
                self.acc_into(*b, |gb| {
                    matmul_ta_acc(g.data(), av.data(), gb.data_mut(), m, n, k);
                });
            }
            Op::SoftmaxRows(a) => {
                let y = self.value_arc(id);
                let n = y.cols();
                self.acc_into(*a, |ga| {
                    for ((grow, yrow), gprow) in ga
                        .data_mut()
                        .chunks_mut(n)
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let d = dot(gprow, yrow);
                        for ((o, yi), gi) in grow.iter_mut().zip(yrow).zip(gprow) {
                            *o += yi * (gi - d);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let xv = self.value_arc(*a);
                let y = self.value_arc(id);
                let n = y.cols();
                let eps = *eps;
                self.acc_into(*a, |ga| {
                    for ((grow, (xrow, yrow)), gprow) in ga
                        .data_mut()
                        .chunks_mut(n)
                        .zip(xv.data().chunks(n).zip(y.data().chunks(n)))
                        .zip(g.data().chunks(n))
                    {
                        let mean = xrow.iter().sum::<f64>() / n as f64;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gprow.iter().sum::<f64>() / n as f64;
                        let gydot = dot(gprow, yrow) / n as f64;
                        for ((o, yi), gi) in grow.iter_mut().zip(yrow).zip(gprow) {
                            *o += inv * (gi - gmean - yi * gydot);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xv = self.value_arc(*x);
                let gv = self.value_arc(*gamma);
                let (c, sp) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let per = (c / groups) * sp;
                // recompute normalized activations per group
                let mut xhat = xv.data().to_vec();
                let mut invs = vec![0.0; *groups];
                for gi in 0..*groups {
                    let seg = &mut xhat[gi * per..(gi + 1) * per];
                    let mean = seg.iter().sum::<f64>() / per as f64;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    invs[gi] = inv;
                    for v in seg.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                }
                self.acc_into(*beta, |gb| {
                    for ch in 0..c {
                        gb.data_mut()[ch] += g.data()[ch * sp..(ch + 1) * sp].iter().sum::<f64>();
                    }
                });
                self.acc_into(*gamma, |gg| {
                    for ch in 0..c {
                        gg.data_mut()[ch] += dot(
                            &g.data()[ch * sp..(ch + 1) * sp],
                            &xhat[ch * sp..(ch + 1) * sp],
                        );
                    }
                });
                self.acc_into(*x, |gx| {
                    // gxhat = g * gamma_c, then layer-norm style backward per group
                    let mut gxhat = g.data().to_vec();
                    for ch in 0..c {
                        for v in gxhat[ch * sp..(ch + 1) * sp].iter_mut() {
                            *v *= gv.data()[ch];
                        }
                    }
                    for gi in 0..*groups {
                        let seg = &gxhat[gi * per..(gi + 1) * per];
                        let hseg = &xhat[gi * per..(gi + 1) * per];
                        let gmean = seg.iter().sum::<f64>() / per as f64;
                        let ghdot = dot(seg, hseg) / per as f64;
                        let out = &mut gx.data_mut()[gi * per..(gi + 1) * per];
                        for ((o, &gi_), &hi) in out.iter_mut().zip(seg).zip(hseg) {
                            *o += invs[gi] * (gi_ - gmean - hi * ghdot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value_arc(*x);
                let wv = self.value_arc(*w);
                let (cin, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let (ho, wo) = {
                    let yo = self.value(id);
                    (yo.shape()[1], yo.shape()[2])
                };
                let (stride, pad) = (*stride, *pad);
                self.acc_into(*b, |gb| {
                    for co in 0..cout {
                        gb.data_mut()[co] +=
                            g.data()[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                    }
                });
                self.acc_into(*w, |gw| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gy = g.data()[(co * ho + oy) * wo + ox];
                                if gy == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= win as isize {
                                                continue;
                                            }
                                            gw.data_mut()[((co * cin + ci) * kh + ky) * kw + kx] +=
                                                gy * xv.data()
                                                    [ci * h * win + iy as usize * win + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc_into(*x, |gx| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gy = g.data()[(co * ho + oy) * wo + ox];
                                if gy == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= win as isize {
                                                continue;
                                            }
                                            gx.data_mut()
                                                [ci * h * win + iy as usize * win + ix as usize] +=
                                                gy * wv.data()
                                                    [((co * cin + ci) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.value_arc(id);
                self.acc_into(*a, |ga| {
                    for ((o, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.value_arc(id);
                self.acc_into(*a, |ga| {
                    for ((o, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = self.value_arc(*a);
                self.acc_into(*a, |ga| {
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        let s = sigmoid_scalar(*xi);
                        *o += gi * (s + xi * s * (1.0 - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value_arc(*a);
                self.acc_into(*a, |ga| {
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi * gelu_grad_scalar(*xi);
                    }
                });
            }
            Op::Softplus(a) => {
                let xv = self.value_arc(*a);
                self.acc_into(*a, |ga| {
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi * sigmoid_scalar(*xi);
                    }
                });
            }
            Op::Log(a) => {
                let xv = self.value_arc(*a);
                self.acc_into(*a, |ga| {
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.value_arc(id);
                self.acc_into(*a, |ga| {
                    for ((o, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.item();
                self.acc_into(*a, |ga| {
                    for o in ga.data_mut() {
                        *o += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gs = g.item() / n;
                self.acc_into(*a, |ga| {
                    for o in ga.data_mut() {
                        *o += gs;
                    }
                });
            }
            Op::MaxPoolSpatial(a) => {
                let xv = self.value_arc(*a);
                let (c, sp) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                self.acc_into(*a, |ga| {
                    for ch in 0..c {
                        let seg = &xv.data()[ch * sp..(ch + 1) * sp];
                        let mut best = 0;
                        for (i, v) in seg.iter().enumerate() {
                            if *v > seg[best] {
                                best = i;
                            }
                        }
                        ga.data_mut()[ch * sp + best] += g.data()[ch];
                    }
                });
            }
            Op::MeanPoolSpatial(a) => {
                let xv = self.value_arc(*a);
                let (c, sp) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                self.acc_into(*a, |ga| {
                    for ch in 0..c {
                        let gs = g.data()[ch] / sp as f64;
                        for o in ga.data_mut()[ch * sp..(ch + 1) * sp].iter_mut() {
                            *o += gs;
                        }
                    }
                });
            }
            Op::Concat { axis, parts } => {
                let parts = parts.clone();
                match axis {
                    0 => {
                        let mut row0 = 0;
                        for p in parts {
                            let v = self.value_arc(p);
                            let n = v.len();
                            let seg = g.data()[row0..row0 + n].to_vec();
                            self.acc_into(p, |gp| axpy(1.0, &seg, gp.data_mut()));
                            row0 += n;
                        }
                    }
                    _ => {
                        let total = g.cols();
                        let rows = g.len() / total;
                        let mut off = 0;
                        for p in parts {
                            let c = self.value(p).cols();
                            self.acc_into(p, |gp| {
                                for r in 0..rows {
                                    axpy(
                                        1.0,
                                        &g.data()[r * total + off..r * total + off + c],
                                        &mut gp.data_mut()[r * c..(r + 1) * c],
                                    );
                                }
                            });
                            off += c;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                let start = *start;
                self.acc_into(*x, |gx| {
                    axpy(
                        1.0,
                        g.data(),
                        &mut gx.data_mut()[start * cols..start * cols + g.len()],
                    );
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = g.cols();
                let rows = g.len() / w;
                let start = *start;
                self.acc_into(*x, |gx| {
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g.data()[r * w..(r + 1) * w],
                            &mut gx.data_mut()[r * cols + start..r * cols + start + w],
                        );
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = self.value(*x).cols();
                let idx = Arc::clone(idx);
                self.acc_into(*x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(
                            1.0,
                            &g.data()[r * cols..(r + 1) * cols],
                            &mut gx.data_mut()[i * cols..(i + 1) * cols],
                        );
                    }
                });
            }
            Op::Permute { x, perm } => {
                let perm = Arc::clone(perm);
                self.acc_into(*x, |gx| {
                    for (i, &src) in perm.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[i];
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
