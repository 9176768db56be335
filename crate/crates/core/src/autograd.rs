//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value plus whatever the backward
//! pass needs. Because inputs always precede outputs, walking the tape from the
//! loss node down to zero is a valid reverse topological order, and each node is
//! visited exactly once.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Tensor },
    Scale { a: Var, s: f64 },
    Sum { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Flatten { a: Var },
    Conv2d(Box<ConvSaved>),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Kwta { a: Var, kept: Vec<bool> },
    Gate(Box<GateSaved>),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    k: Var,
    b: Option<Var>,
    geom: ConvGeom,
    /// im2col buffers, one `[C·9 × Ho·Wo]` block per sample.
    cols: Vec<f64>,
}

#[derive(Debug)]
struct GateSaved {
    ff: Var,
    segments: Var,
    context: Vec<f64>,
    selected: Vec<usize>,
    gates: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Geometry of a 3×3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

pub const KERNEL: usize = 3;

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if kernel[2] != KERNEL || kernel[3] != KERNEL || kernel[1] != input[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let extent = |len: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < KERNEL || (padded - KERNEL) % stride != 0 {
                return Err(Error::config(format!(
                    "conv2d output extent for input {len}, pad {pad}, stride {stride} is not an integer"
                )));
            }
            Ok((padded - KERNEL) / stride + 1)
        };
        Ok(ConvGeom {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            height: input[2],
            width: input[3],
            stride,
            pad,
            out_height: extent(input[2])?,
            out_width: extent(input[3])?,
        })
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source offset in one sample's `C×H×W` block for a patch row and output position.
    #[inline]
    fn source(&self, row: usize, pos: usize) -> Option<usize> {
        let c = row / (KERNEL * KERNEL);
        let ki = (row / KERNEL) % KERNEL;
        let kj = row % KERNEL;
        let oh = pos / self.out_width;
        let ow = pos % self.out_width;
        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
        let iw = (ow * self.stride + kj) as isize - self.pad as isize;
        if ih < 0 || iw < 0 || ih as usize >= self.height || iw as usize >= self.width {
            None
        } else {
            Some((c * self.height + ih as usize) * self.width + iw as usize)
        }
    }
}

/// Dynamically built computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    last_visits: usize,
}

/// Deterministic top-k selection: `true` for the `k` largest entries, ties broken
/// toward the lowest index.
pub fn top_k_mask(values: &[f64], k: usize) -> Vec<bool> {
    let n = values.len();
    let mut kept = vec![false; n];
    if k >= n {
        kept.iter_mut().for_each(|v| *v = true);
        return kept;
    }
    if k == 0 {
        return kept;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |&a: &usize, &b: &usize| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    order.select_nth_unstable_by(k - 1, cmp);
    for &i in &order[..k] {
        kept[i] = true;
    }
    kept
}

/// Index of the entry with the largest magnitude, lowest index on ties.
pub fn abs_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if v.abs() > values[best].abs() {
            best = i;
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    /// Number of node visits performed by the most recent [`Graph::backward`].
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rows(self.value(a).data(), k),
            MatRef::rows(self.value(b).data(), n),
            0.0,
            out.data_mut(),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `x·wᵀ + b` for `x: [batch×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = Tensor::zeros(&[batch, fan_out]);
        if let Some(b) = b {
            let sb = self.value(b).shape();
            if sb != [fan_out] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: vec![fan_out],
                    rhs: sb.to_vec(),
                });
            }
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            MatRef::rows(self.value(x).data(), fan_in),
            MatRef::transposed(self.value(w).data(), fan_in),
            beta,
            out.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with a constant tensor (used for sparsity masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: self.value(a).shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(c.data())
            .for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst { a, c }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, s }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid { a }, rg)
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.is_empty() {
            return Err(Error::usage("cannot flatten a scalar"));
        }
        let rest: usize = shape[1..].iter().product();
        let out = self.value(a).clone().reshape(&[shape[0], rest])?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Flatten { a }, rg))
    }

    /// 3×3 cross-correlation of `x: [N×C×H×W]` with `k: [O×C×3×3]`, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.out_channels] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: vec![geom.out_channels],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let rows = geom.patch_rows();
        let positions = geom.positions();
        let sample_in = geom.in_channels * geom.height * geom.width;
        let sample_out = geom.out_channels * positions;
        let xs = self.value(x).data();
        let mut cols = vec![0.0; geom.batch * rows * positions];
        for n in 0..geom.batch {
            let src = &xs[n * sample_in..(n + 1) * sample_in];
            let dst = &mut cols[n * rows * positions..(n + 1) * rows * positions];
            for r in 0..rows {
                for p in 0..positions {
                    if let Some(i) = geom.source(r, p) {
                        dst[r * positions + p] = src[i];
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[geom.batch, geom.out_channels, geom.out_height, geom.out_width]);
        let kernel = self.value(k).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..geom.batch {
            let dst = &mut out.data_mut()[n * sample_out..(n + 1) * sample_out];
            if let Some(bias) = &bias {
                for (o, chunk) in dst.chunks_mut(positions).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[o]);
                }
            }
            gemm(
                geom.out_channels,
                rows,
                positions,
                1.0,
                MatRef::rows(kernel, rows),
                MatRef::rows(&cols[n * rows * positions..(n + 1) * rows * positions], positions),
                if bias.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let mut deps = vec![x, k];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d(Box::new(ConvSaved { x, k, b, geom, cols })), rg))
    }

    /// 2×2 max pooling with stride 2 over `[N×C×H×W]`; trailing odd rows/cols are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::Dimension {
                op: "maxpool2",
                lhs: shape,
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let od = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + i) * ow + j;
                    od[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// k-winners-take-all along every axis after the first: each sample keeps its
    /// `k` largest entries, lowest index first on ties, and zeros the rest.
    pub fn kwta(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "kwta",
                lhs: shape.to_vec(),
                rhs: vec![k],
            });
        }
        let width: usize = shape[1..].iter().product();
        if k == 0 || k > width {
            return Err(Error::config(format!("kwta k={k} outside 1..={width}")));
        }
        let mut out = self.value(a).clone();
        let mut kept = Vec::with_capacity(out.numel());
        for row in out.data_mut().chunks_mut(width) {
            let mask = top_k_mask(row, k);
            for (v, &keep) in row.iter_mut().zip(&mask) {
                if !keep {
                    *v = 0.0;
                }
            }
            kept.extend(mask);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Kwta { a, kept }, rg))
    }

    /// Dendritic context gating.
    ///
    /// `ff` is `[N×C]` (dense) or `[N×C×H×W]` (conv), `segments` is `[C×J×D]` and
    /// `context` has `D` entries. Each channel picks the segment whose response to
    /// the context has the largest magnitude and scales its whole output by the
    /// sigmoid of that signed response.
    pub fn gate(&mut self, ff: Var, segments: Var, context: &Tensor) -> Result<Var> {
        let fshape = self.value(ff).shape().to_vec();
        let sshape = self.value(segments).shape().to_vec();
        if fshape.len() < 2 || sshape.len() != 3 || sshape[0] != fshape[1] || sshape[1] == 0 {
            return Err(Error::Dimension {
                op: "gate",
                lhs: fshape,
                rhs: sshape,
            });
        }
        let (channels, num_seg, dim) = (sshape[0], sshape[1], sshape[2]);
        if context.numel() != dim {
            return Err(Error::config(format!(
                "context length {} does not match dendrite context dimension {dim}",
                context.numel()
            )));
        }
        let ctx = context.data();
        let seg = self.value(segments).data();
        let mut selected = Vec::with_capacity(channels);
        let mut gates = Vec::with_capacity(channels);
        let mut responses = vec![0.0; num_seg];
        for c in 0..channels {
            for (j, r) in responses.iter_mut().enumerate() {
                let u = &seg[(c * num_seg + j) * dim..(c * num_seg + j + 1) * dim];
                *r = u.iter().zip(ctx).map(|(a, b)| a * b).sum();
            }
            let best = abs_argmax(&responses);
            selected.push(best);
            gates.push(sigmoid(responses[best]));
        }
        let spatial: usize = fshape[2..].iter().product();
        let mut out = self.value(ff).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= gates[(i / spatial) % channels];
        }
        let rg = self.rg(&[ff, segments]);
        Ok(self.push(
            out,
            Op::Gate(Box::new(GateSaved {
                ff,
                segments,
                context: ctx.to_vec(),
                selected,
                gates,
            })),
            rg,
        ))
    }

    /// Gate values and selected segment per channel of a gate node.
    pub fn gate_state(&self, v: Var) -> Option<(&[f64], &[usize])> {
        match &self.nodes[v.0].op {
            Op::Gate(s) => Some((&s.gates, &s.selected)),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_xent",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let batch = labels.len();
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let shifted_label = row[label] - max;
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            loss += total.ln() - shifted_label;
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::scalar(loss / batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagate from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut visits = 0;
        for id in (0..=loss.0).rev() {
            visits += 1;
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        self.last_visits = visits;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let buf = slot(grads, *a, sa);
                    gemm(m, n, k, 1.0, MatRef::rows(gd, n), MatRef::transposed(self.value(*b).data(), n), 1.0, buf.data_mut());
                }
                if wants(*b) {
                    let buf = slot(grads, *b, sb);
                    gemm(k, m, n, 1.0, MatRef::transposed(self.value(*a).data(), k), MatRef::rows(gd, n), 1.0, buf.data_mut());
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
                if wants(*x) {
                    let buf = slot(grads, *x, sx);
                    gemm(batch, fan_out, fan_in, 1.0, MatRef::rows(gd, fan_out), MatRef::rows(self.value(*w).data(), fan_in), 1.0, buf.data_mut());
                }
                if wants(*w) {
                    let buf = slot(grads, *w, sw);
                    gemm(fan_out, batch, fan_in, 1.0, MatRef::transposed(gd, fan_out), MatRef::rows(self.value(*x).data(), fan_in), 1.0, buf.data_mut());
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let buf = slot(grads, *b, &[fan_out]).data_mut();
                        for row in gd.chunks(fan_out) {
                            buf.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let buf = slot(grads, v, g.shape()).data_mut();
                        buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = self.value(other).data();
                        let buf = slot(grads, v, g.shape()).data_mut();
                        for ((x, y), z) in buf.iter_mut().zip(gd).zip(o) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::MulConst { a, c } => {
                if wants(*a) {
                    let buf = slot(grads, *a, g.shape()).data_mut();
                    for ((x, y), z) in buf.iter_mut().zip(gd).zip(c.data()) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale { a, s } => {
                if wants(*a) {
                    let buf = slot(grads, *a, g.shape()).data_mut();
                    buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let buf = slot(grads, *a, &shape).data_mut();
                    buf.iter_mut().for_each(|x| *x += gd[0]);
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let input = self.value(*a).data();
                    let buf = slot(grads, *a, g.shape()).data_mut();
                    for ((x, y), i) in buf.iter_mut().zip(gd).zip(input) {
                        if *i > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    let out = node.value.data();
                    let buf = slot(grads, *a, g.shape()).data_mut();
                    for ((x, y), s) in buf.iter_mut().zip(gd).zip(out) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Flatten { a } => {
                if wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let buf = slot(grads, *a, &shape).data_mut();
                    buf.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv2d(saved) => self.conv_backward(saved, gd, grads),
            Op::MaxPool2 { x, argmax } => {
                if wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let buf = slot(grads, *x, &shape).data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += gd[o];
                    }
                }
            }
            Op::Kwta { a, kept } => {
                if wants(*a) {
                    let buf = slot(grads, *a, g.shape()).data_mut();
                    for ((x, y), &k) in buf.iter_mut().zip(gd).zip(kept) {
                        if k {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gate(saved) => {
                let ff = self.value(saved.ff);
                let channels = saved.gates.len();
                let spatial: usize = ff.shape()[2..].iter().product();
                if wants(saved.ff) {
                    let buf = slot(grads, saved.ff, ff.shape()).data_mut();
                    for (i, (x, y)) in buf.iter_mut().zip(gd).enumerate() {
                        *x += y * saved.gates[(i / spatial) % channels];
                    }
                }
                if wants(saved.segments) {
                    let mut dgate = vec![0.0; channels];
                    for (i, (y, f)) in gd.iter().zip(ff.data()).enumerate() {
                        dgate[(i / spatial) % channels] += y * f;
                    }
                    let sshape = self.value(saved.segments).shape().to_vec();
                    let (num_seg, dim) = (sshape[1], sshape[2]);
                    let buf = slot(grads, saved.segments, &sshape).data_mut();
                    for c in 0..channels {
                        let s = saved.gates[c];
                        let dv = dgate[c] * s * (1.0 - s);
                        let base = (c * num_seg + saved.selected[c]) * dim;
                        for (x, ctx) in buf[base..base + dim].iter_mut().zip(&saved.context) {
                            *x += dv * ctx;
                        }
                    }
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                if wants(*logits) {
                    let classes = probs.len() / labels.len();
                    let scale = gd[0] / labels.len() as f64;
                    let shape = self.value(*logits).shape().to_vec();
                    let buf = slot(grads, *logits, &shape).data_mut();
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let i = r * classes + c;
                            let target = if c == label { 1.0 } else { 0.0 };
                            buf[i] += scale * (probs[i] - target);
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(&self, saved: &ConvSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let geom = saved.geom;
        let rows = geom.patch_rows();
        let positions = geom.positions();
        let sample_out = geom.out_channels * positions;
        let sample_in = geom.in_channels * geom.height * geom.width;
        if let Some(b) = saved.b {
            if self.nodes[b.0].requires_grad {
                let buf = slot(grads, b, &[geom.out_channels]).data_mut();
                for (i, y) in gd.iter().enumerate() {
                    buf[(i / positions) % geom.out_channels] += y;
                }
            }
        }
        if self.nodes[saved.k.0].requires_grad {
            let kshape = self.value(saved.k).shape().to_vec();
            let buf = slot(grads, saved.k, &kshape);
            for n in 0..geom.batch {
                gemm(
                    geom.out_channels,
                    positions,
                    rows,
                    1.0,
                    MatRef::rows(&gd[n * sample_out..(n + 1) * sample_out], positions),
                    MatRef::transposed(&saved.cols[n * rows * positions..(n + 1) * rows * positions], positions),
                    1.0,
                    buf.data_mut(),
                );
            }
        }
        if self.nodes[saved.x.0].requires_grad {
            let kernel = self.value(saved.k).data();
            let xshape = self.value(saved.x).shape().to_vec();
            let buf = slot(grads, saved.x, &xshape).data_mut();
            let mut dcols = vec![0.0; rows * positions];
            for n in 0..geom.batch {
                gemm(
                    rows,
                    geom.out_channels,
                    positions,
                    1.0,
                    MatRef::transposed(kernel, rows),
                    MatRef::rows(&gd[n * sample_out..(n + 1) * sample_out], positions),
                    0.0,
                    &mut dcols,
                );
                let dst = &mut buf[n * sample_in..(n + 1) * sample_in];
                for r in 0..rows {
                    for p in 0..positions {
                        if let Some(i) = geom.source(r, p) {
                            dst[i] += dcols[r * positions + p];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}
