//! Tape-based computation graph for reverse-mode differentiation.
//!
//! Every operation appends a node holding its result and the ids of its
//! parents; insertion order is a topological order, so one reverse sweep in
//! [`Graph::backward`] applies the chain rule. A graph is consumed by its
//! backward pass and must be rebuilt by a fresh forward.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Identity of a node within one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Padding mode for [`Graph::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// Output extent equals input extent at stride 1 (odd kernels only).
    Same,
    Explicit(usize),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose2(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: usize,
    },
    Silu(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    LogSoftmax {
        input: NodeId,
        axis: usize,
    },
    Reshape(NodeId),
    Concat0(Vec<NodeId>),
    AvgPool2(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanSpatial(NodeId),
    SqrtElem(NodeId),
    Clamp01(NodeId),
    AddChan {
        x: NodeId,
        b: NodeId,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Ordered record of executed operations with parent links.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a constant (no gradient ever flows into it).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient populated by [`Graph::backward`], if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<F>> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape")
        })
    }

    fn push(&mut self, value: Tensor<F>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    // ── element-wise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y)
            .map(|v| self.push(v, Op::Add(a, b), self.rg2(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y)
            .map(|v| self.push(v, Op::Sub(a, b), self.rg2(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y)
            .map(|v| self.push(v, Op::Mul(a, b), self.rg2(a, b)))
    }

    fn zip(&self, what: &str, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = F::from_f64(c);
        let v = self.value(a).map(|x| x * k);
        let rg = self.requires_grad(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.requires_grad(a);
        self.push(v, Op::Silu(a), rg)
    }

    /// Element-wise square root; inputs are expected non-negative and tiny
    /// negative float fuzz is clamped to zero.
    pub fn sqrt_elem(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(F::zero()).sqrt());
        let rg = self.requires_grad(a);
        self.push(v, Op::SqrtElem(a), rg)
    }

    /// Clamp to [0, 1]; the subgradient passes through on the closed
    /// interval and is zero outside it.
    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(F::zero()).min(F::one()));
        let rg = self.requires_grad(a);
        self.push(v, Op::Clamp01(a), rg)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::Matmul(a, b), self.rg2(a, b)))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose2: rank-2 required, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let v = Tensor::new(vec![n, m], transpose_raw(self.value(a).data(), m, n))?;
        let rg = self.requires_grad(a);
        Ok(self.push(v, Op::Transpose2(a), rg))
    }

    // ── convolution and normalization ──────────────────────────────────

    /// 2-D cross-correlation of `input: [C,H,W]` with `kernel: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: Pad) -> Result<NodeId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::Shape(format!("conv2d: input {si:?}, kernel {sk:?}")));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != ci {
            return Err(Error::Shape(format!(
                "conv2d: input channels {ci} vs kernel channels {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Contract(format!("conv2d: even kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: zero stride".into()));
        }
        let p = match pad {
            Pad::Same => (kh - 1) / 2,
            Pad::Explicit(p) => p,
        };
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * p,
                w + 2 * p
            )));
        }
        if (h + 2 * p - kh) % stride != 0 || (w + 2 * p - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {p}"
            )));
        }
        let oh = (h + 2 * p - kh) / stride + 1;
        let ow = (w + 2 * p - kw) / stride + 1;
        let out = conv2d_raw(
            self.value(input).data(),
            self.value(kernel).data(),
            ConvDims { ci, h, w, co, kh, kw, stride, pad: p, oh, ow },
        );
        let v = Tensor::new(vec![co, oh, ow], out)?;
        Ok(self.push(
            v,
            Op::Conv2d { input, kernel, stride, pad: p },
            self.rg2(input, kernel),
        ))
    }

    /// Group normalization over `[C,H,W]` with per-channel affine parameters.
    pub fn group_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, groups: usize) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 {
            return Err(Error::Shape(format!("group_norm: rank-3 required, got {si:?}")));
        }
        let c = si[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Contract(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "group_norm: affine params {:?}/{:?} vs {c} channels",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xhat, _) = group_norm_stats(self.value(input), groups);
        let hw = si[1] * si[2];
        let mut out = xhat;
        {
            let (g, b) = (self.value(gain).data(), self.value(bias).data());
            for ch in 0..c {
                let (gc, bc) = (g[ch], b[ch]);
                for v in &mut out[ch * hw..(ch + 1) * hw] {
                    *v = *v * gc + bc;
                }
            }
        }
        let rg = self.rg2(input, gain) || self.requires_grad(bias);
        let v = Tensor::new(si, out)?;
        Ok(self.push(v, Op::GroupNorm { input, gain, bias, groups }, rg))
    }

    // ── shape manipulation ─────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let v = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenate along axis 0; trailing extents must agree.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat0: empty input list".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat0: trailing dims {:?} vs {:?}",
                    &s[1..],
                    tail
                )));
            }
            dim0 += s[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat0(parts.to_vec()), rg))
    }

    // ── spatial resampling ─────────────────────────────────────────────

    /// 2x2 average pooling with stride 2; extents must be even.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2: bad shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let quarter = F::from_f64(0.25);
        let mut out = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    out[(ch * oh + oy) * ow + ox] =
                        (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter;
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2(a), rg))
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2: bad shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    let cands = [base, base + 1, base + w, base + w + 1];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    let oi = (ch * oh + oy) * ow + ox;
                    out[oi] = x[best];
                    argmax[oi] = best;
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2 { input: a, argmax }, rg))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample2: bad shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ch * h + y) * w + xx];
                    let base = (ch * oh + 2 * y) * ow + 2 * xx;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + ow] = v;
                    out[base + ow + 1] = v;
                }
            }
        }
        let rg = self.requires_grad(a);
        let v = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(v, Op::Upsample2(a), rg))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = F::from_f64(t.numel() as f64);
        let s = t.data().iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().fold(F::zero(), |acc, &v| acc + v);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C]`.
    pub fn mean_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("mean_spatial: bad shape {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let x = self.value(a).data();
        let inv = F::from_f64(1.0 / hw as f64);
        let out: Vec<F> = (0..c)
            .map(|ch| x[ch * hw..(ch + 1) * hw].iter().fold(F::zero(), |a, &v| a + v) * inv)
            .collect();
        let rg = self.requires_grad(a);
        let v = Tensor::new(vec![c], out)?;
        Ok(self.push(v, Op::MeanSpatial(a), rg))
    }

    // ── broadcasting helpers ───────────────────────────────────────────

    /// Add a per-channel bias `b: [C]` to `x: [C,H,W]`.
    pub fn add_chan(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(b) != [sx[0]] {
            return Err(Error::Shape(format!(
                "add_chan: x {sx:?}, b {:?}",
                self.shape(b)
            )));
        }
        let hw = sx[1] * sx[2];
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for c in 0..sx[0] {
            let bc = bv[c];
            for v in &mut out[c * hw..(c + 1) * hw] {
                *v += bc;
            }
        }
        let rg = self.rg2(x, b);
        let v = Tensor::new(sx, out)?;
        Ok(self.push(v, Op::AddChan { x, b }, rg))
    }

    // ── softmax family ─────────────────────────────────────────────────

    /// Max-subtraction stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "softmax: axis {axis} out of range for {s:?}"
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for_each_lane(&s, axis, |start, stride, len| {
            let mut m = out[start];
            for i in 1..len {
                let v = out[start + i * stride];
                if v > m {
                    m = v;
                }
            }
            let mut sum = F::zero();
            for i in 0..len {
                let e = (out[start + i * stride] - m).exp();
                out[start + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                out[start + i * stride] /= sum;
            }
        });
        let rg = self.requires_grad(a);
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::Softmax { input: a, axis }, rg))
    }

    /// Stabilized log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "log_softmax: axis {axis} out of range for {s:?}"
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for_each_lane(&s, axis, |start, stride, len| {
            let mut m = out[start];
            for i in 1..len {
                let v = out[start + i * stride];
                if v > m {
                    m = v;
                }
            }
            let mut sum = F::zero();
            for i in 0..len {
                sum += (out[start + i * stride] - m).exp();
            }
            let lse = m + sum.ln();
            for i in 0..len {
                out[start + i * stride] -= lse;
            }
        });
        let rg = self.requires_grad(a);
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::LogSoftmax { input: a, axis }, rg))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates a gradient for every leaf
    /// with `requires_grad` (zeros when unreachable from the loss); the graph
    /// is consumed and refuses a second backward.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "second backward without a fresh forward".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }

        // Leaves that require grad but were never reached get explicit zeros.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![F::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), g));
                self.accumulate(b, grads, |dst| axpy(dst, F::one(), g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), g));
                self.accumulate(b, grads, |dst| axpy(dst, -F::one(), g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accumulate(a, grads, |dst| {
                    for ((d, &gi), &bv) in dst.iter_mut().zip(g).zip(vb) {
                        *d += gi * bv;
                    }
                });
                self.accumulate(b, grads, |dst| {
                    for ((d, &gi), &av) in dst.iter_mut().zip(g).zip(va) {
                        *d += gi * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let k = F::from_f64(c);
                self.accumulate(a, grads, |dst| axpy(dst, k, g));
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if self.requires_grad(a) {
                    // dA = g . B^T
                    let bt = transpose_raw(vb, k, nn);
                    let da = matmul_raw(g, &bt, m, nn, k);
                    self.accumulate(a, grads, |dst| axpy(dst, F::one(), &da));
                }
                if self.requires_grad(b) {
                    // dB = A^T . g
                    let at = transpose_raw(va, m, k);
                    let db = matmul_raw(&at, g, k, m, nn);
                    self.accumulate(b, grads, |dst| axpy(dst, F::one(), &db));
                }
            }
            Op::Transpose2(a) => {
                let s = self.nodes[i].value.shape();
                let (m, nn) = (s[0], s[1]);
                let gt = transpose_raw(g, m, nn);
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), &gt));
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let si = self.nodes[input.0].value.shape();
                let sk = self.nodes[kernel.0].value.shape();
                let so = self.nodes[i].value.shape();
                let dims = ConvDims {
                    ci: si[0],
                    h: si[1],
                    w: si[2],
                    co: sk[0],
                    kh: sk[2],
                    kw: sk[3],
                    stride,
                    pad,
                    oh: so[1],
                    ow: so[2],
                };
                if self.requires_grad(input) {
                    let di = conv2d_input_grad(g, self.nodes[kernel.0].value.data(), dims);
                    self.accumulate(input, grads, |dst| axpy(dst, F::one(), &di));
                }
                if self.requires_grad(kernel) {
                    let dk = conv2d_kernel_grad(g, self.nodes[input.0].value.data(), dims);
                    self.accumulate(kernel, grads, |dst| axpy(dst, F::one(), &dk));
                }
            }
            Op::GroupNorm { input, gain, bias, groups } => {
                let x = &self.nodes[input.0].value;
                let s = x.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let (xhat, inv_std) = group_norm_stats(x, groups);
                let gv = self.nodes[gain.0].value.data();
                if self.requires_grad(bias) {
                    let mut db = vec![F::zero(); c];
                    for ch in 0..c {
                        db[ch] = g[ch * hw..(ch + 1) * hw].iter().fold(F::zero(), |a, &v| a + v);
                    }
                    self.accumulate(bias, grads, |dst| axpy(dst, F::one(), &db));
                }
                if self.requires_grad(gain) {
                    let mut dg = vec![F::zero(); c];
                    for ch in 0..c {
                        dg[ch] = g[ch * hw..(ch + 1) * hw]
                            .iter()
                            .zip(&xhat[ch * hw..(ch + 1) * hw])
                            .fold(F::zero(), |a, (&gi, &xi)| a + gi * xi);
                    }
                    self.accumulate(gain, grads, |dst| axpy(dst, F::one(), &dg));
                }
                if self.requires_grad(input) {
                    let cpg = c / groups;
                    let n_group = cpg * hw;
                    let n_f = F::from_f64(n_group as f64);
                    let mut dx = vec![F::zero(); c * hw];
                    for gi in 0..groups {
                        let lo = gi * n_group;
                        let hi = lo + n_group;
                        // dy = upstream * gain (per channel)
                        let mut sum_dy = F::zero();
                        let mut sum_dy_xhat = F::zero();
                        for ch_off in 0..cpg {
                            let ch = gi * cpg + ch_off;
                            let gc = gv[ch];
                            for j in 0..hw {
                                let idx = ch * hw + j;
                                let dy = g[idx] * gc;
                                dx[idx] = dy;
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[idx];
                            }
                        }
                        let m1 = sum_dy / n_f;
                        let m2 = sum_dy_xhat / n_f;
                        let inv = inv_std[gi];
                        for idx in lo..hi {
                            dx[idx] = (dx[idx] - m1 - xhat[idx] * m2) * inv;
                        }
                    }
                    self.accumulate(input, grads, |dst| axpy(dst, F::one(), &dx));
                }
            }
            Op::Silu(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(a, grads, |dst| {
                    for ((d, &gi), &xv) in dst.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xv);
                        *d += gi * (s + xv * s * (F::one() - s));
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let s = self.nodes[i].value.shape().to_vec();
                let mut dx = vec![F::zero(); y.len()];
                for_each_lane(&s, axis, |start, stride, len| {
                    let mut dot = F::zero();
                    for j in 0..len {
                        let idx = start + j * stride;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = start + j * stride;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                });
                self.accumulate(input, grads, |dst| axpy(dst, F::one(), &dx));
            }
            Op::LogSoftmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let s = self.nodes[i].value.shape().to_vec();
                let mut dx = vec![F::zero(); y.len()];
                for_each_lane(&s, axis, |start, stride, len| {
                    let mut gsum = F::zero();
                    for j in 0..len {
                        gsum += g[start + j * stride];
                    }
                    for j in 0..len {
                        let idx = start + j * stride;
                        dx[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                });
                self.accumulate(input, grads, |dst| axpy(dst, F::one(), &dx));
            }
            Op::Reshape(a) => {
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), g));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in &parts {
                    let n = self.nodes[p.0].value.numel();
                    let slice = &g[off..off + n];
                    self.accumulate(p, grads, |dst| axpy(dst, F::one(), slice));
                    off += n;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let n = self.nodes[input.0].value.numel();
                let mut dx = vec![F::zero(); n];
                for (oi, &src) in argmax.iter().enumerate() {
                    dx[src] += g[oi];
                }
                self.accumulate(input, grads, |dst| axpy(dst, F::one(), &dx));
            }
            Op::AvgPool2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = F::from_f64(0.25);
                let mut dx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(ch * oh + oy) * ow + ox] * quarter;
                            let base = (ch * h + 2 * oy) * w + 2 * ox;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), &dx));
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (ch * oh + 2 * y) * ow + 2 * xx;
                            dx[(ch * h + y) * w + xx] =
                                g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                        }
                    }
                }
                self.accumulate(a, grads, |dst| axpy(dst, F::one(), &dx));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = g[0] / F::from_f64(n as f64);
                self.accumulate(a, grads, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accumulate(a, grads, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanSpatial(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let inv = F::from_f64(1.0 / hw as f64);
                self.accumulate(a, grads, |dst| {
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        for d in &mut dst[ch * hw..(ch + 1) * hw] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SqrtElem(a) => {
                let y = self.nodes[i].value.data();
                let floor = F::from_f64(1e-12);
                self.accumulate(a, grads, |dst| {
                    for ((d, &gi), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += gi * F::from_f64(0.5) / yv.max(floor);
                    }
                });
            }
            Op::Clamp01(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(a, grads, |dst| {
                    for ((d, &gi), &xv) in dst.iter_mut().zip(g).zip(x) {
                        if xv >= F::zero() && xv <= F::one() {
                            *d += gi;
                        }
                    }
                });
            }
            Op::AddChan { x, b } => {
                let s = self.nodes[x.0].value.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                self.accumulate(x, grads, |dst| axpy(dst, F::one(), g));
                if self.requires_grad(b) {
                    let mut db = vec![F::zero(); c];
                    for ch in 0..c {
                        db[ch] = g[ch * hw..(ch + 1) * hw].iter().fold(F::zero(), |a, &v| a + v);
                    }
                    self.accumulate(b, grads, |dst| axpy(dst, F::one(), &db));
                }
            }
        }
    }

    fn accumulate(&self, target: NodeId, grads: &mut [Option<Vec<F>>], f: impl FnOnce(&mut [F])) {
        if !self.requires_grad(target) {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[target.0].value.numel()]);
        }
        f(slot.as_mut().expect("just initialized"));
    }
}

fn axpy<F: Real>(dst: &mut [F], a: F, x: &[F]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Visit each 1-D lane of `shape` along `axis` as (start, stride, len).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Row span of valid output positions for one kernel column offset:
/// ix = ox*stride + dx - pad must land in [0, w).
fn col_span(dims: ConvDims, dx: usize) -> (usize, usize) {
    let ConvDims { w, kw: _, stride, pad, ow, .. } = dims;
    let ox0 = if dx >= pad { 0 } else { (pad - dx).div_ceil(stride) };
    let mut ox1 = ow;
    // largest ox with ox*stride + dx - pad <= w-1
    let limit = w + pad;
    if dx < limit {
        let max_ox = (limit - 1 - dx) / stride;
        ox1 = ox1.min(max_ox + 1);
    } else {
        ox1 = 0;
    }
    (ox0, ox1.max(ox0))
}

fn conv2d_raw<F: Real>(input: &[F], kernel: &[F], dims: ConvDims) -> Vec<F> {
    let ConvDims { ci, h, w, co, kh, kw, stride, pad, oh, ow } = dims;
    let mut out = vec![F::zero(); co * oh * ow];
    for o in 0..co {
        let oplane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let iplane = &input[c * h * w..(c + 1) * h * w];
            let kbase = ((o * ci) + c) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let wgt = kernel[kbase + dy * kw + dx];
                    let (ox0, ox1) = col_span(dims, dx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy_p = oy * stride + dy;
                        if iy_p < pad || iy_p >= h + pad {
                            continue;
                        }
                        let iy = iy_p - pad;
                        let ix0 = ox0 * stride + dx - pad;
                        let orow = &mut oplane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let irow = &iplane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wgt * iv;
                            }
                        } else {
                            for (t, ov) in orow.iter_mut().enumerate() {
                                *ov += wgt * iplane[iy * w + ix0 + t * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_input_grad<F: Real>(gout: &[F], kernel: &[F], dims: ConvDims) -> Vec<F> {
    let ConvDims { ci, h, w, co, kh, kw, stride, pad, oh, ow } = dims;
    let mut dinp = vec![F::zero(); ci * h * w];
    for o in 0..co {
        let gplane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let dplane = &mut dinp[c * h * w..(c + 1) * h * w];
            let kbase = ((o * ci) + c) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let wgt = kernel[kbase + dy * kw + dx];
                    let (ox0, ox1) = col_span(dims, dx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy_p = oy * stride + dy;
                        if iy_p < pad || iy_p >= h + pad {
                            continue;
                        }
                        let iy = iy_p - pad;
                        let ix0 = ox0 * stride + dx - pad;
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let drow = &mut dplane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += wgt * gv;
                            }
                        } else {
                            for (t, &gv) in grow.iter().enumerate() {
                                dplane[iy * w + ix0 + t * stride] += wgt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dinp
}

fn conv2d_kernel_grad<F: Real>(gout: &[F], input: &[F], dims: ConvDims) -> Vec<F> {
    let ConvDims { ci, h, w, co, kh, kw, stride, pad, oh, ow } = dims;
    let mut dker = vec![F::zero(); co * ci * kh * kw];
    for o in 0..co {
        let gplane = &gout[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let iplane = &input[c * h * w..(c + 1) * h * w];
            let kbase = ((o * ci) + c) * kh * kw;
            for dy in 0..kh {
                for dx in 0..kw {
                    let (ox0, ox1) = col_span(dims, dx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = F::zero();
                    for oy in 0..oh {
                        let iy_p = oy * stride + dy;
                        if iy_p < pad || iy_p >= h + pad {
                            continue;
                        }
                        let iy = iy_p - pad;
                        let ix0 = ox0 * stride + dx - pad;
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let irow = &iplane[iy * w + ix0..iy * w + ix0 + (ox1 - ox0)];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                        } else {
                            for (t, &gv) in grow.iter().enumerate() {
                                acc += gv * iplane[iy * w + ix0 + t * stride];
                            }
                        }
                    }
                    dker[kbase + dy * kw + dx] += acc;
                }
            }
        }
    }
    dker
}

/// Normalized values and per-group inverse standard deviations (eps = 1e-5).
fn group_norm_stats<F: Real>(x: &Tensor<F>, groups: usize) -> (Vec<F>, Vec<F>) {
    let s = x.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let cpg = c / groups;
    let n_group = cpg * hw;
    let n_f = F::from_f64(n_group as f64);
    let eps = F::from_f64(1e-5);
    let mut xhat = x.data().to_vec();
    let mut inv_std = vec![F::zero(); groups];
    for gi in 0..groups {
        let lo = gi * n_group;
        let hi = lo + n_group;
        let mean = xhat[lo..hi].iter().fold(F::zero(), |a, &v| a + v) / n_f;
        let var = xhat[lo..hi]
            .iter()
            .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n_f;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[gi] = inv;
        for v in &mut xhat[lo..hi] {
            *v = (*v - mean) * inv;
        }
    }
    (xhat, inv_std)
}
