use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, Layout};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
///
/// A `Var` is only meaningful on the tape (and tape generation) that created
/// it; after [`Tape::reset`] every outstanding handle is detached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    generation: u64,
}

/// Executed operation, with references to its input nodes.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    BroadcastTo { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    Sqrt { x: usize },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        batch: usize,
        cols: Vec<f64>,
    },
    AvgPool2d { x: usize, k: usize, stride: usize },
    GlobalAvgPool { x: usize },
    Sum { x: usize },
    SumAxis { x: usize, axis: usize },
    LogSoftmax { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, indices: Vec<usize> },
}

/// Cost of one recorded operation, split the way the FLOP counter reports it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    /// Multiply-accumulates of convolutions and matrix products.
    pub macs: u64,
    /// One op per element for pooling and activations.
    pub per_element: u64,
    /// Other elementwise arithmetic (gating products, normalization).
    pub elementwise: u64,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded record of one forward pass, replayed in reverse by
/// [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: fresh_generation(),
            backward_done: false,
        }
    }

    /// Drop every recorded node. Outstanding [`Var`]s become detached.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation = fresh_generation();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert!(
            v.generation == self.generation && v.id < self.nodes.len(),
            "Var does not belong to this tape"
        );
        v.id
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[self.idx(v)];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Operation name and cost for every node, in execution order.
    pub fn op_costs(&self) -> impl Iterator<Item = (&'static str, OpCost)> + '_ {
        self.nodes.iter().map(|n| cost_of(n, &self.nodes))
    }

    /// Hash of every piecewise branch taken so far: the sign pattern of each
    /// relu/sqrt input and the rows picked by each `index_select`. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                &Op::Relu { x } | &Op::Sqrt { x } => {
                    for v in self.nodes[x].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::IndexSelect { indices, .. } => indices.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            Layout::rm(k),
            self.nodes[ib].value.data(),
            Layout::rm(n),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: ia, b: ib }, rg))
    }

    /// Batched product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for bi in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &da[bi * m * k..],
                Layout::rm(k),
                &db[bi * k * n..],
                Layout::rm(n),
                &mut out[bi * m * n..],
                0.0,
            );
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::BatchMatMul { a: ia, b: ib },
            rg,
        ))
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.nodes[ix].value.data(), r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose { x: ix }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let t = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(t, Op::Reshape { x: ix }, rg))
    }

    /// Broadcast size-1 axes of `x` to `shape` (same rank required).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::dim("broadcast_to", &s, shape));
        }
        let src = self.nodes[ix].value.data();
        let strides = broadcast_strides(&s, shape);
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for_each_broadcast(shape, &strides, |off| out.push(src[off]));
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastTo { x: ix }, rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(ta.shape(), out)?, ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, Op::Add { a: ia, b: ib }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, Op::Sub { a: ia, b: ib }, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(t, Op::Div { a: ia, b: ib }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> (Tensor, usize) {
        let ix = self.idx(x);
        (self.nodes[ix].value.map(f), ix)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (t, ix) = self.unary(x, |v| v * c);
        let rg = self.rg(&[ix]);
        self.push(t, Op::Scale { x: ix, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (t, ix) = self.unary(x, |v| v + c);
        let rg = self.rg(&[ix]);
        self.push(t, Op::AddScalar { x: ix }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (t, ix) = self.unary(x, sigmoid);
        let rg = self.rg(&[ix]);
        self.push(t, Op::Sigmoid { x: ix }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (t, ix) = self.unary(x, |v| v.max(0.0));
        let rg = self.rg(&[ix]);
        self.push(t, Op::Relu { x: ix }, rg)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let (t, ix) = self.unary(x, f64::sqrt);
        let rg = self.rg(&[ix]);
        self.push(t, Op::Sqrt { x: ix }, rg)
    }

    // ---- convolution and pooling ------------------------------------------

    /// 2-D cross-correlation of `[B, C, H, W]` (or `[C, H, W]`) with
    /// `[O, C, k, k]`, square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        let (batch, c, h, wd, unbatched) = match xs[..] {
            [b, c, h, w] => (b, c, h, w, false),
            [c, h, w] => (1, c, h, w, true),
            _ => return Err(Error::dim("conv2d", &xs, &ws)),
        };
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let (o, k) = (ws[0], ws[2]);
        if k % 2 == 0 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        if (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 {
            return Err(Error::Geometry(format!(
                "conv2d output extent not integral: input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}"
            )));
        }
        let g = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let xd = self.nodes[ix].value.data();
        let wdat = self.nodes[iw].value.data();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; batch * rows * ncol]
        };
        let mut out = vec![0.0; batch * o * ncol];
        for b in 0..batch {
            let xb = &xd[b * c * h * wd..(b + 1) * c * h * wd];
            let colb: &[f64] = if pointwise {
                xb
            } else {
                let cb = &mut cols[b * rows * ncol..(b + 1) * rows * ncol];
                kernels::im2col(xb, &g, cb);
                cb
            };
            kernels::gemm(
                o,
                rows,
                ncol,
                wdat,
                Layout::rm(rows),
                colb,
                Layout::rm(ncol),
                &mut out[b * o * ncol..],
                0.0,
            );
        }
        let shape: Vec<usize> = if unbatched {
            vec![o, g.oh, g.ow]
        } else {
            vec![batch, o, g.oh, g.ow]
        };
        let rg = self.rg(&[ix, iw]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                x: ix,
                w: iw,
                geom: g,
                batch,
                cols,
            },
            rg,
        ))
    }

    /// Average pooling over the last two axes, no padding, floor extents.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() < 2 || k == 0 || stride == 0 || s[s.len() - 2] < k || s[s.len() - 1] < k {
            return Err(Error::dim("avg_pool2d", &s, &[k, k]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let planes = s[..s.len() - 2].iter().product();
        let out = kernels::avg_pool_fwd(self.nodes[ix].value.data(), planes, (h, w), (k, stride), (oh, ow));
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2d { x: ix, k, stride }, rg))
    }

    /// Mean over the last two axes: `[B, C, H, W] -> [B, C]`, `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 3 && s.len() != 4 {
            return Err(Error::dim("global_avg_pool", &s, &[]));
        }
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let out = self.nodes[ix]
            .value
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[ix]);
        Ok(self.push(
            Tensor::new(&s[..s.len() - 2], out)?,
            Op::GlobalAvgPool { x: ix },
            rg,
        ))
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of every element, as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(&[ix]);
        self.push(Tensor::scalar(s), Op::Sum { x: ix }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::dim("sum_axis", &s, &[axis]));
        }
        let (outer, len, inner) = split_at_axis(&s, axis);
        let d = self.nodes[ix].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                add_into(
                    &mut out[o * inner..(o + 1) * inner],
                    &d[(o * len + l) * inner..][..inner],
                );
            }
        }
        let mut shape = s.clone();
        shape[axis] = 1;
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { x: ix, axis }, rg))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x);
        let t = &self.nodes[ix].value;
        if t.ndim() == 0 {
            return Err(Error::dim("log_softmax", t.shape(), &[]));
        }
        let k = *t.shape().last().unwrap();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x: ix }, rg))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let first = self
            .nodes
            .get(*ids.first().ok_or(Error::Tape("concat of zero parts"))?)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let len = self.nodes[i].value.shape()[axis] * inner;
                out.extend_from_slice(&self.nodes[i].value.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: ids, axis }, rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_at_axis(&s, axis);
        let d = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[ix]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x: ix, axis, start }, rg))
    }

    /// Split into `n` equal parts along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, n: usize) -> Result<Vec<Var>> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("split", &s, &[axis]));
        }
        let extent = s[axis];
        if n == 0 || extent % n != 0 {
            return Err(Error::Divisibility { extent, parts: n });
        }
        let len = extent / n;
        (0..n).map(|j| self.slice(x, axis, j * len, len)).collect()
    }

    /// Gather rows along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let s = self.nodes[ix].value.shape().to_vec();
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) || indices.is_empty() {
            return Err(Error::dim("index_select", &s, indices));
        }
        let w = self.nodes[ix].value.numel() / s[0];
        let d = self.nodes[ix].value.data();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(&[ix]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::IndexSelect {
                x: ix,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulate d(loss)/d(node) into every reachable node that requires a
    /// gradient. May run once per tape episode.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.generation != self.generation || loss.id >= self.nodes.len() {
            return Err(Error::Tape("backward on a detached tensor"));
        }
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this tape; reset it first"));
        }
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Tape("backward needs a scalar loss"));
        }
        self.backward_done = true;
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.nodes[loss.id].grad = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.vjp(id, &g);
            self.nodes[id].grad = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut self.nodes[target].grad {
                    Some(acc) => add_into(acc, &delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, Layout::rm(n), val(b).data(), Layout::tr(n), &mut da, 0.0);
                    out.push((a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(a).data(), Layout::tr(k), g, Layout::rm(n), &mut db, 0.0);
                    out.push((b, db));
                }
            }
            &Op::BatchMatMul { a, b } => {
                let sa = val(a).shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = val(b).shape()[2];
                if wants(a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            Layout::rm(n),
                            &val(b).data()[i * k * n..],
                            Layout::tr(n),
                            &mut da[i * m * k..],
                            0.0,
                        );
                    }
                    out.push((a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &val(a).data()[i * m * k..],
                            Layout::tr(k),
                            &g[i * m * n..],
                            Layout::rm(n),
                            &mut db[i * k * n..],
                            0.0,
                        );
                    }
                    out.push((b, db));
                }
            }
            &Op::Transpose { x } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                out.push((x, transpose_last2(g, r, c)));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            &Op::BroadcastTo { x } => {
                let src = val(x).shape();
                let strides = broadcast_strides(src, node.value.shape());
                let mut dx = vec![0.0; val(x).numel()];
                let mut k = 0;
                for_each_broadcast(node.value.shape(), &strides, |off| {
                    dx[off] += g[k];
                    k += 1;
                });
                out.push((x, dx));
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a).data(), val(b).data());
                if wants(a) {
                    out.push((a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if wants(b) {
                    out.push((b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Div { a, b } => {
                let (va, vb) = (val(a).data(), val(b).data());
                if wants(a) {
                    out.push((a, g.iter().zip(vb).map(|(g, y)| g / y).collect()));
                }
                if wants(b) {
                    out.push((
                        b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    ));
                }
            }
            &Op::Scale { x, c } => out.push((x, g.iter().map(|v| v * c).collect())),
            &Op::AddScalar { x, .. } => out.push((x, g.to_vec())),
            &Op::Sigmoid { x } => out.push((
                x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )),
            &Op::Relu { x } => out.push((
                x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            &Op::Sqrt { x } => out.push((
                x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
            )),
            Op::Conv2d {
                x,
                w,
                geom: geo,
                batch,
                cols,
            } => {
                let (x, w, batch) = (*x, *w, *batch);
                let o = val(w).shape()[0];
                let (rows, ncol) = (geo.col_rows(), geo.col_cols());
                let pointwise = cols.is_empty();
                let xd = val(x).data();
                let img = geo.c * geo.h * geo.w;
                if wants(w) {
                    let mut dw = vec![0.0; o * rows];
                    for b in 0..batch {
                        let colb = if pointwise {
                            &xd[b * img..(b + 1) * img]
                        } else {
                            &cols[b * rows * ncol..(b + 1) * rows * ncol]
                        };
                        kernels::gemm(
                            o,
                            ncol,
                            rows,
                            &g[b * o * ncol..],
                            Layout::rm(ncol),
                            colb,
                            Layout::tr(ncol),
                            &mut dw,
                            1.0,
                        );
                    }
                    out.push((w, dw));
                }
                if wants(x) {
                    let mut dx = vec![0.0; batch * img];
                    let mut dcol = vec![0.0; rows * ncol];
                    for b in 0..batch {
                        let dxb = &mut dx[b * img..(b + 1) * img];
                        let target: &mut [f64] = if pointwise { dxb } else { &mut dcol };
                        kernels::gemm(
                            rows,
                            o,
                            ncol,
                            val(w).data(),
                            Layout::tr(rows),
                            &g[b * o * ncol..],
                            Layout::rm(ncol),
                            target,
                            0.0,
                        );
                        if !pointwise {
                            kernels::col2im(&dcol, geo, &mut dx[b * img..(b + 1) * img]);
                        }
                    }
                    out.push((x, dx));
                }
            }
            &Op::AvgPool2d { x, k, stride } => {
                let s = val(x).shape();
                let os = node.value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                let planes = s[..s.len() - 2].iter().product();
                let mut dx = vec![0.0; val(x).numel()];
                kernels::avg_pool_bwd(g, planes, (h, w), (k, stride), (oh, ow), &mut dx);
                out.push((x, dx));
            }
            &Op::GlobalAvgPool { x } => {
                let s = val(x).shape();
                let hw = s[s.len() - 2] * s[s.len() - 1];
                let mut dx = Vec::with_capacity(val(x).numel());
                for gv in g {
                    dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                out.push((x, dx));
            }
            &Op::Sum { x } => out.push((x, vec![g[0]; val(x).numel()])),
            &Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_at_axis(val(x).shape(), axis);
                let mut dx = Vec::with_capacity(val(x).numel());
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((x, dx));
            }
            &Op::LogSoftmax { x } => {
                let k = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(k).zip(node.value.data().chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * gs));
                }
                out.push((x, dx));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * total + offset..][..len]);
                        }
                        out.push((p, dp));
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_at_axis(val(x).shape(), axis);
                let len = node.value.shape()[axis];
                let mut dx = vec![0.0; val(x).numel()];
                for o in 0..outer {
                    dx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((x, dx));
            }
            Op::IndexSelect { x, indices } => {
                let w = val(*x).numel() / val(*x).shape()[0];
                let mut dx = vec![0.0; val(*x).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut dx[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                }
                out.push((*x, dx));
            }
        }
        out
    }
}

fn transpose_last2(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for (src, dst) in d.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 && dst[d] != 1 { 0 } else { acc };
        acc *= src[d];
    }
    strides
}

/// Visit the source offset of every destination element in row-major order.
fn for_each_broadcast(dst: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let numel: usize = dst.iter().product();
    let mut idx = vec![0usize; dst.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        f(off);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn cost_of(n: &Node, nodes: &[Node]) -> (&'static str, OpCost) {
    let numel = n.value.numel() as u64;
    let input_numel = |i: usize| nodes[i].value.numel() as u64;
    let mac = |macs| OpCost {
        macs,
        ..Default::default()
    };
    let per = |per_element| OpCost {
        per_element,
        ..Default::default()
    };
    let elem = |elementwise| OpCost {
        elementwise,
        ..Default::default()
    };
    match &n.op {
        Op::Leaf => ("leaf", OpCost::default()),
        &Op::MatMul { a, .. } => ("matmul", mac(numel * nodes[a].value.shape()[1] as u64)),
        &Op::BatchMatMul { a, .. } => ("bmm", mac(numel * nodes[a].value.shape()[2] as u64)),
        Op::Transpose { .. } => ("transpose", OpCost::default()),
        Op::Reshape { .. } => ("reshape", OpCost::default()),
        Op::BroadcastTo { .. } => ("broadcast_to", OpCost::default()),
        Op::Add { .. } => ("add", elem(numel)),
        Op::Sub { .. } => ("sub", elem(numel)),
        Op::Mul { .. } => ("mul", elem(numel)),
        Op::Div { .. } => ("div", elem(numel)),
        Op::Scale { .. } => ("scale", elem(numel)),
        Op::AddScalar { .. } => ("add_scalar", elem(numel)),
        Op::Sigmoid { .. } => ("sigmoid", per(numel)),
        Op::Relu { .. } => ("relu", per(numel)),
        Op::Sqrt { .. } => ("sqrt", elem(numel)),
        &Op::Conv2d { geom: g, .. } => {
            ("conv2d", mac(numel * (g.c * g.k * g.k) as u64))
        }
        &Op::AvgPool2d { x, .. } => ("avg_pool2d", per(input_numel(x))),
        &Op::GlobalAvgPool { x } => ("global_avg_pool", per(input_numel(x))),
        &Op::Sum { x } => ("sum", elem(input_numel(x))),
        &Op::SumAxis { x, .. } => ("sum_axis", elem(input_numel(x))),
        Op::LogSoftmax { .. } => ("log_softmax", per(numel)),
        Op::Concat { .. } => ("concat", OpCost::default()),
        Op::Slice { .. } => ("slice", OpCost::default()),
        Op::IndexSelect { .. } => ("index_select", OpCost::default()),
    }
}
