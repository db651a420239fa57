//! Reverse-mode tape.
//!
//! Ops append nodes to a [`Tape`]; node ids are handed out in creation
//! order, so ascending id order is a topological order of the DAG and
//! [`Tape::backward`] is a single reverse sweep. A node's gradient
//! accumulates contributions from every use before the sweep reaches it.
//!
//! A tape lives for one forward/backward pair (one training step). It is
//! not shared across threads; concurrent runs each build their own tape.

use super::conv::{conv2d_backward, conv2d_forward, gemm, gemm_nt, gemm_tn};
use super::grouping::Grouping;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Element precision a tape simulates.
///
/// Storage is always `f64`; in [`Precision::F32`] every op output (and every
/// finished gradient buffer) is rounded through `f32`, so values are exactly
/// those a 32-bit pipeline would produce while accumulation still runs in
/// 64-bit, matching the crate's accumulate-wide policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Parse(format!("unknown precision {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// What produced a node; inputs are ids of earlier nodes.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId, f64),
    MulScalar(TensorId, f64),
    Sqrt(TensorId),
    Relu(TensorId),
    SumAll(TensorId),
    GroupMean(TensorId, Grouping),
    GroupBroadcast(TensorId, Grouping),
    AvgPool2(TensorId),
    GlobalAvgPool(TensorId),
    Linear { x: TensorId, w: TensorId },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-use reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// 64-bit tape with finite-checking enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            precision: Precision::F64,
            check_finite: true,
            backward_done: false,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::new()
        }
    }

    /// Toggles the NaN/Inf scan after each op. On by default; timed training
    /// runs switch it off and rely on the per-step loss check instead.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (parameter or probed activation).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input (data, frozen statistics).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if the node
    /// participated.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn round(&self, data: &mut [f64]) {
        if self.precision == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn push_unchecked(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.round(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &'static str) -> Result<TensorId> {
        let id = self.push_unchecked(value, op, requires_grad);
        if self.check_finite && !self.nodes[id.0].value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("forward {what} (node {})", id.0),
            });
        }
        Ok(id)
    }

    fn same_shape(&self, a: TensorId, b: TensorId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{sa:?}"),
                got: format!("{sb:?}"),
            });
        }
        Ok(())
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    // ── Elementwise and reduction ops ──────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), self.rg2(a, b), "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Sub(a, b), self.rg2(a, b), "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), self.rg2(a, b), "mul")
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "div")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Div(a, b), self.rg2(a, b), "div")
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::AddScalar(x, c), rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::MulScalar(x, c), rg, "mul_scalar")
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::Sqrt(x), rg, "sqrt")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg, "relu")
    }

    /// Sum of all elements, as a rank-0 tensor. Accumulates in flat order.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), rg, "sum_all")
    }

    /// Per-group mean under `grouping`; output shape `[group_count]`.
    pub fn group_mean(&mut self, x: TensorId, grouping: Grouping) -> Result<TensorId> {
        if grouping.total_len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                context: "group_mean",
                expected: format!("{} elements", grouping.total_len()),
                got: format!("{:?}", self.value(x).shape()),
            });
        }
        let mut sums = vec![0.0; grouping.group_count()];
        grouping.sum_into(self.value(x).data(), &mut sums);
        let inv = 1.0 / grouping.group_size() as f64;
        for v in &mut sums {
            *v *= inv;
        }
        let value = Tensor::new(vec![grouping.group_count()], sums)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::GroupMean(x, grouping), rg, "group_mean")
    }

    /// Expands a `[group_count]` vector to `out_shape`, each group filled
    /// with its value.
    pub fn group_broadcast(
        &mut self,
        v: TensorId,
        grouping: Grouping,
        out_shape: &[usize],
    ) -> Result<TensorId> {
        if self.value(v).numel() != grouping.group_count() {
            return Err(Error::ShapeMismatch {
                context: "group_broadcast",
                expected: format!("{} group values", grouping.group_count()),
                got: format!("{:?}", self.value(v).shape()),
            });
        }
        let total: usize = out_shape.iter().product();
        if total != grouping.total_len() {
            return Err(Error::ShapeMismatch {
                context: "group_broadcast",
                expected: format!("{} elements", grouping.total_len()),
                got: format!("{out_shape:?}"),
            });
        }
        let mut out = vec![0.0; total];
        grouping.broadcast_into(self.value(v).data(), &mut out);
        let value = Tensor::new(out_shape.to_vec(), out)?;
        let rg = self.requires_grad(v);
        self.push(value, Op::GroupBroadcast(v, grouping), rg, "group_broadcast")
    }

    // ── Network ops ────────────────────────────────────────────────────

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "avg_pool2",
                expected: "4-D input with even spatial dims".into(),
                got: format!("{s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * 0.25;
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::AvgPool2(x), rg, "avg_pool2")
    }

    /// Mean over the spatial dims: `[b, c, h, w]` to `[b, c]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "global_avg_pool",
                expected: "4-D input".into(),
                got: format!("{s:?}"),
            });
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xs = self.value(x).data();
        let inv = 1.0 / hw as f64;
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            let mut acc = 0.0;
            for v in &xs[bc * hw..(bc + 1) * hw] {
                acc += v;
            }
            out[bc] = acc * inv;
        }
        let value = Tensor::new(vec![b, c], out)?;
        let rg = self.requires_grad(x);
        self.push(value, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    /// Fully connected product: `[b, f] . [f, k]` to `[b, k]` (no bias).
    pub fn linear(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                expected: "[b, f] input with [f, k] weight".into(),
                got: format!("input {xs:?}, weight {ws:?}"),
            });
        }
        let (b, f, k) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; b * k];
        gemm(self.value(x).data(), self.value(w).data(), &mut out, b, f, k);
        let value = Tensor::new(vec![b, k], out)?;
        let rg = self.rg2(x, w);
        self.push(value, Op::Linear { x, w }, rg, "linear")
    }

    /// Convolution over `[b, c, h, w]` with weight `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let value = conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let rg = self.rg2(x, w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, rg, "conv2d")
    }

    /// Mean cross-entropy of softmaxed logits `[b, k]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                expected: format!("[{}, k] logits", labels.len()),
                got: format!("{s:?}"),
            });
        }
        let (b, k) = (s[0], s[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: k,
                    index: i,
                });
            }
        }
        let zs = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &zs[bi * k..(bi + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &z in row {
                denom += (z - m).exp();
            }
            let lse = m + denom.ln();
            for (j, &z) in row.iter().enumerate() {
                probs[bi * k + j] = (z - lse).exp();
            }
            loss += lse - row[labels[bi]];
        }
        loss /= b as f64;
        let rg = self.requires_grad(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills `grad` for every node that
    /// requires grad and participated in the loss. One call per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        self.backward_done = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        if !self.requires_grad(loss) {
            return Err(Error::InvalidArgument(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.apply_backward(id, &g, &mut grads)?;
            self.nodes[id].grad = Some(Tensor {
                shape: self.nodes[id].value.shape().to_vec(),
                data: g,
            });
        }

        if self.precision == Precision::F32 {
            for node in &mut self.nodes {
                if let Some(g) = &mut node.grad {
                    for v in g.data_mut() {
                        *v = *v as f32 as f64;
                    }
                }
            }
        }
        if self.check_finite {
            for (i, node) in self.nodes.iter().enumerate() {
                if let Some(g) = &node.grad {
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("backward (grad of node {i})"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: TensorId,
        contribution: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        contribution(buf);
    }

    fn apply_backward(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        // Clone cheap op metadata up front so `self` stays shared below.
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, |buf| axpy(buf, g, 1.0));
                self.accumulate(grads, b, |buf| axpy(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |buf| axpy(buf, g, 1.0));
                self.accumulate(grads, b, |buf| axpy(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(x, _) => {
                self.accumulate(grads, x, |buf| axpy(buf, g, 1.0));
            }
            Op::MulScalar(x, c) => {
                self.accumulate(grads, x, |buf| axpy(buf, g, c));
            }
            Op::Sqrt(x) => {
                let yv = self.nodes[id].value.data();
                self.accumulate(grads, x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / (2.0 * yv[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gs = g[0];
                self.accumulate(grads, x, |buf| {
                    for v in buf.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::GroupMean(x, grouping) => {
                let inv = 1.0 / grouping.group_size() as f64;
                let scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
                self.accumulate(grads, x, |buf| {
                    let mut spread = vec![0.0; buf.len()];
                    grouping.broadcast_into(&scaled, &mut spread);
                    axpy(buf, &spread, 1.0);
                });
            }
            Op::GroupBroadcast(v, grouping) => {
                self.accumulate(grads, v, |buf| {
                    grouping.sum_into(g, buf);
                });
            }
            Op::AvgPool2(x) => {
                let s = self.value(x).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, x, |buf| {
                    for bc in 0..b * c {
                        let src = &g[bc * oh * ow..(bc + 1) * oh * ow];
                        let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let q = src[oy * ow + ox] * 0.25;
                                let i = 2 * oy * w + 2 * ox;
                                dst[i] += q;
                                dst[i + 1] += q;
                                dst[i + w] += q;
                                dst[i + w + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(x).shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let inv = 1.0 / hw as f64;
                self.accumulate(grads, x, |buf| {
                    for bc in 0..b * c {
                        let q = g[bc] * inv;
                        for v in &mut buf[bc * hw..(bc + 1) * hw] {
                            *v += q;
                        }
                    }
                });
            }
            Op::Linear { x, w } => {
                let (b, f) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let k = self.value(w).shape()[1];
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                // gx[b][f] += g[b][k] . w[f][k]^T
                self.accumulate(grads, x, |buf| gemm_nt(g, wv, buf, b, k, f));
                // gw[f][k] += x[b][f]^T . g[b][k]
                self.accumulate(grads, w, |buf| gemm_tn(xv, g, buf, b, f, k));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let gy = Tensor {
                    shape: self.nodes[id].value.shape().to_vec(),
                    data: g.to_vec(),
                };
                let (gx, gw) = conv2d_backward(self.value(x), self.value(w), &gy, stride, pad)?;
                self.accumulate(grads, x, |buf| axpy(buf, gx.data(), 1.0));
                self.accumulate(grads, w, |buf| axpy(buf, gw.data(), 1.0));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, logits, |buf| {
                    for (bi, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            buf[bi * k + j] += scale * (probs[bi * k + j] - indicator);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(buf: &mut [f64], src: &[f64], scale: f64) {
    for (b, &s) in buf.iter_mut().zip(src) {
        *b += s * scale;
    }
}
