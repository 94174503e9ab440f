//! Dense f32 tensors and a define-by-run reverse-mode autodiff graph.
//!
//! The graph is rebuilt on every forward pass: the rescaling factor changes
//! feature-map shapes each iteration, so there is nothing worth caching
//! across steps. Nodes live in construction order, which is already a valid
//! topological order for the backward sweep. A graph belongs to a single
//! worker; independent graphs may run on parallel workers freely.

mod conv;
mod gemm;

use rayon::prelude::*;
use thiserror::Error;

use crate::resize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on a tensor detached from gradient tracking")]
    Detached,
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

/// Dense N-dimensional array of f32, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret the shape as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            [b, c, h, w] => Ok((*b, *c, *h, *w)),
            other => Err(TensorError::Shape {
                op: "dims4",
                msg: format!("expected 4-d tensor, got {other:?}"),
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f32 },
    Sum { x: TensorId },
    LeakyRelu { x: TensorId, slope: f32 },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId },
    ConcatChannels { a: TensorId, b: TensorId },
    BilinearResize { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<u32> },
    SliceView { x: TensorId, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run computation graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: Option<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Start counting multiply-accumulates of subsequent forward ops
    /// (convolution products and resize taps). Used to cross-check the
    /// analytic cost model against what actually executed.
    pub fn enable_mac_counter(&mut self) {
        self.macs = Some(0);
    }

    pub fn macs(&self) -> Option<u64> {
        self.macs
    }

    fn count_macs(&mut self, n: u64) {
        if let Some(m) = self.macs.as_mut() {
            *m += n;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Move a node's value out of the graph (e.g. to hand leaf parameters
    /// back to the optimizer without copying).
    pub fn take_value(&mut self, id: TensorId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(vec![0]))
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<f32>> {
        self.nodes[id.0].grad.take()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f32) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|a| a * factor).collect();
        let shape = v.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor { shape, data }, rg, Op::Scale { x, factor })
    }

    /// Sum of all elements, reduced in 64-bit, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].value.data().iter().map(|&v| v as f64).sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total as f32), rg, Op::Sum { x })
    }

    /// y = x for x >= 0, slope * x otherwise. The gradient at exactly 0 is 1.
    pub fn leaky_relu(&mut self, x: TensorId, slope: f32) -> Result<TensorId, TensorError> {
        if !(slope >= 0.0) {
            return Err(TensorError::InvalidArg {
                op: "leaky_relu",
                msg: format!("slope must be >= 0, got {slope}"),
            });
        }
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| if a >= 0.0 { a } else { slope * a }).collect();
        let shape = v.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::LeakyRelu { x, slope }))
    }

    /// y = x W^T + b with x: [B,N], w: [M,N], b: [M].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape(),
            self.nodes[w.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        let (batch, n) = match xs {
            [bn, n] => (*bn, *n),
            _ => {
                return Err(TensorError::Shape {
                    op: "linear",
                    msg: format!("x must be [B,N], got {xs:?}"),
                })
            }
        };
        let (m, wn) = match ws {
            [m, wn] => (*m, *wn),
            _ => {
                return Err(TensorError::Shape {
                    op: "linear",
                    msg: format!("w must be [M,N], got {ws:?}"),
                })
            }
        };
        if wn != n || bs != [m] {
            return Err(TensorError::Shape {
                op: "linear",
                msg: format!("inner dims disagree: x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let out = linear_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            batch,
            n,
            m,
        );
        self.count_macs((batch * m * n) as u64);
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![batch, m], data: out }, rg, Op::Linear { x, w, b }))
    }

    /// Same-padding stride-1 convolution with an odd square kernel.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let d = self.conv_dims(input, kernel, bias)?;
        let mut out = vec![0.0f32; d.batch * d.cout * d.plane()];
        conv::forward(
            self.nodes[input.0].value.data(),
            self.nodes[kernel.0].value.data(),
            self.nodes[bias.0].value.data(),
            &d,
            &mut out,
        );
        self.count_macs(d.macs());
        let rg = self.any_grad(&[input, kernel, bias]);
        let shape = vec![d.batch, d.cout, d.h, d.w];
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Conv2d { input, kernel, bias }))
    }

    fn conv_dims(
        &self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<conv::ConvDims, TensorError> {
        let (b, cin, h, w) = self.nodes[input.0].value.dims4()?;
        let (cout, kcin, kh, kw) = self.nodes[kernel.0].value.dims4()?;
        if kh != kw {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if kh % 2 == 0 {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                msg: format!("kernel size must be odd for same padding, got {kh}"),
            });
        }
        if kcin != cin {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!("input has {cin} channels but kernel expects {kcin}"),
            });
        }
        if self.nodes[bias.0].value.shape() != [cout] {
            return Err(TensorError::Shape {
                op: "conv2d",
                msg: format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.nodes[bias.0].value.shape()
                ),
            });
        }
        Ok(conv::ConvDims { batch: b, cin, h, w, cout, k: kh })
    }

    /// Stack two feature maps along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ba, ca, ha, wa) = self.nodes[a.0].value.dims4()?;
        let (bb, cb, hb, wb) = self.nodes[b.0].value.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(TensorError::Shape {
                op: "concat_channels",
                msg: format!(
                    "batch/spatial dims disagree: {:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let rg = self.any_grad(&[a, b]);
        let shape = vec![ba, ca + cb, ha, wa];
        Ok(self.push(Tensor { shape, data }, rg, Op::ConcatChannels { a, b }))
    }

    /// Bilinear resampling to `[out_h, out_w]` (half-pixel centers, edge clamp).
    pub fn bilinear_resize(
        &mut self,
        x: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId, TensorError> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArg {
                op: "bilinear_resize",
                msg: "output extents must be >= 1".into(),
            });
        }
        let mut out = vec![0.0f32; b * c * out_h * out_w];
        resize::bilinear_forward(self.nodes[x.0].value.data(), b * c, h, w, out_h, out_w, &mut out);
        self.count_macs((4 * b * c * out_h * out_w) as u64);
        let rg = self.nodes[x.0].requires_grad;
        let shape = vec![b, c, out_h, out_w];
        Ok(self.push(Tensor { shape, data: out }, rg, Op::BilinearResize { x }))
    }

    /// Resize `x` to the spatial dims of `skip` so channel concatenation
    /// is always shape-legal.
    pub fn upsample_to_match(&mut self, x: TensorId, skip: TensorId) -> Result<TensorId, TensorError> {
        let (_, _, sh, sw) = self.nodes[skip.0].value.dims4()?;
        self.bilinear_resize(x, sh, sw)
    }

    /// Mean categorical cross-entropy over all B*H*W pixels.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[u32]) -> Result<TensorId, TensorError> {
        let (b, c, h, w) = self.nodes[logits.0].value.dims4()?;
        if labels.len() != b * h * w {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                msg: format!("expected {} labels, got {}", b * h * w, labels.len()),
            });
        }
        for &l in labels {
            if l as usize >= c {
                return Err(TensorError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let loss = cross_entropy_forward(self.nodes[logits.0].value.data(), labels, b, c, h, w);
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Reinterpret `numel(shape)` contiguous elements of `x` starting at
    /// `start` as a tensor of the given shape. Used to slice a flat weight
    /// vector into per-layer kernels and biases.
    pub fn view_slice(
        &mut self,
        x: TensorId,
        start: usize,
        shape: Vec<usize>,
    ) -> Result<TensorId, TensorError> {
        let len: usize = shape.iter().product();
        let total = self.nodes[x.0].value.numel();
        if start + len > total {
            return Err(TensorError::Shape {
                op: "view_slice",
                msg: format!("slice {start}..{} out of range for {total} elements", start + len),
            });
        }
        let data = self.nodes[x.0].value.data()[start..start + len].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::SliceView { x, start }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf (zeros if the leaf does not influence the
    /// loss); intermediate gradients are freed as soon as they are used.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let gout = node.grad.take().expect("checked above");
            backward_step(before, &node.op, &node.value, &gout);
        }

        // Leaves outside the loss's ancestry still get a (zero) gradient.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(TensorError::Shape { op, msg: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }
}

// ── op kernels ───────────────────────────────────────────────────────

fn linear_forward(x: &[f32], w: &[f32], bias: &[f32], batch: usize, n: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m];
    // Parallel over output rows; each weight row is read once per batch item.
    out.par_chunks_mut(4096.min(m.max(1)))
        .enumerate()
        .for_each(|(chunk_idx, out_chunk)| {
            let m0 = chunk_idx * 4096.min(m.max(1));
            for (j, o) in out_chunk.iter_mut().enumerate() {
                let flat = m0 + j;
                let (bi, mi) = (flat / m, flat % m);
                let xr = &x[bi * n..(bi + 1) * n];
                let wr = &w[mi * n..(mi + 1) * n];
                let mut acc = 0.0f32;
                for (a, b) in xr.iter().zip(wr.iter()) {
                    acc += a * b;
                }
                *o = acc + bias[mi];
            }
        });
    out
}

fn linear_backward_x(gout: &[f32], w: &[f32], batch: usize, n: usize, m: usize, gx: &mut [f32]) {
    // gx[b,:] += sum_m gout[b,m] * w[m,:], chunked over m with ordered reduce.
    const CHUNK: usize = 8192;
    for bi in 0..batch {
        let go = &gout[bi * m..(bi + 1) * m];
        let partials: Vec<Vec<f32>> = (0..m)
            .into_par_iter()
            .chunks(CHUNK)
            .map(|ms| {
                let mut acc = vec![0.0f32; n];
                for mi in ms {
                    let g = go[mi];
                    if g != 0.0 {
                        for (a, wv) in acc.iter_mut().zip(&w[mi * n..(mi + 1) * n]) {
                            *a += g * wv;
                        }
                    }
                }
                acc
            })
            .collect();
        let dst = &mut gx[bi * n..(bi + 1) * n];
        for p in partials {
            for (d, v) in dst.iter_mut().zip(p) {
                *d += v;
            }
        }
    }
}

fn linear_backward_w(gout: &[f32], x: &[f32], batch: usize, n: usize, m: usize, gw: &mut [f32]) {
    // gw[m,:] += sum_b gout[b,m] * x[b,:]; rows are independent.
    gw.par_chunks_mut(n).enumerate().for_each(|(mi, row)| {
        for bi in 0..batch {
            let g = gout[bi * m + mi];
            if g != 0.0 {
                for (r, xv) in row.iter_mut().zip(&x[bi * n..(bi + 1) * n]) {
                    *r += g * xv;
                }
            }
        }
    });
}

fn cross_entropy_forward(logits: &[f32], labels: &[u32], b: usize, c: usize, h: usize, w: usize) -> f32 {
    let plane = h * w;
    let mut total = 0.0f64;
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logits[base + ci * plane + p]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ((logits[base + ci * plane + p] - maxv) as f64).exp();
            }
            let lse = maxv as f64 + sum.ln();
            let lab = labels[bi * plane + p] as usize;
            total += lse - logits[base + lab * plane + p] as f64;
        }
    }
    (total / (b * plane) as f64) as f32
}

fn cross_entropy_backward(
    logits: &[f32],
    labels: &[u32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    upstream: f32,
    glogits: &mut [f32],
) {
    let plane = h * w;
    let inv = upstream / (b * plane) as f32;
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut maxv = f32::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logits[base + ci * plane + p]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ((logits[base + ci * plane + p] - maxv) as f64).exp();
            }
            let lab = labels[bi * plane + p] as usize;
            for ci in 0..c {
                let prob = (((logits[base + ci * plane + p] - maxv) as f64).exp() / sum) as f32;
                let indicator = if ci == lab { 1.0 } else { 0.0 };
                glogits[base + ci * plane + p] += inv * (prob - indicator);
            }
        }
    }
}

// ── backward dispatch ────────────────────────────────────────────────

/// Accumulate into a node's gradient buffer, creating it on first use.
fn with_grad(nodes: &mut [Node], id: TensorId, f: impl FnOnce(&[Node], &mut [f32])) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let numel = nodes[id.0].value.numel();
    let mut g = nodes[id.0].grad.take().unwrap_or_else(|| vec![0.0; numel]);
    f(nodes, &mut g);
    nodes[id.0].grad = Some(g);
}

fn backward_step(before: &mut [Node], op: &Op, out_value: &Tensor, gout: &[f32]) {
    match op {
        Op::Leaf => unreachable!("leaves are skipped in the backward sweep"),
        Op::Add { a, b } => {
            for id in [a, b] {
                with_grad(before, *id, |_, g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            with_grad(before, *a, |nodes, g| {
                for ((gi, go), y) in g.iter_mut().zip(gout).zip(nodes[b.0].value.data()) {
                    *gi += go * y;
                }
            });
            with_grad(before, *b, |nodes, g| {
                for ((gi, go), x) in g.iter_mut().zip(gout).zip(nodes[a.0].value.data()) {
                    *gi += go * x;
                }
            });
        }
        Op::Scale { x, factor } => {
            with_grad(before, *x, |_, g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go * factor;
                }
            });
        }
        Op::Sum { x } => {
            let s = gout[0];
            with_grad(before, *x, |_, g| {
                for gi in g.iter_mut() {
                    *gi += s;
                }
            });
        }
        Op::LeakyRelu { x, slope } => {
            with_grad(before, *x, |nodes, g| {
                for ((gi, go), &xv) in g.iter_mut().zip(gout).zip(nodes[x.0].value.data()) {
                    *gi += go * if xv >= 0.0 { 1.0 } else { *slope };
                }
            });
        }
        Op::Linear { x, w, b } => {
            let (batch, n) = {
                let s = before[x.0].value.shape();
                (s[0], s[1])
            };
            let m = before[w.0].value.shape()[0];
            with_grad(before, *x, |nodes, g| {
                linear_backward_x(gout, nodes[w.0].value.data(), batch, n, m, g);
            });
            with_grad(before, *w, |nodes, g| {
                linear_backward_w(gout, nodes[x.0].value.data(), batch, n, m, g);
            });
            with_grad(before, *b, |_, g| {
                for bi in 0..batch {
                    for (gi, go) in g.iter_mut().zip(&gout[bi * m..(bi + 1) * m]) {
                        *gi += go;
                    }
                }
            });
        }
        Op::Conv2d { input, kernel, bias } => {
            let (batch, cin, h, w) = before[input.0].value.dims4().expect("validated at build");
            let (cout, _, k, _) = before[kernel.0].value.dims4().expect("validated at build");
            let d = conv::ConvDims { batch, cin, h, w, cout, k };
            let grads = conv::backward(
                before[input.0].value.data(),
                before[kernel.0].value.data(),
                gout,
                &d,
                before[input.0].requires_grad,
                before[kernel.0].requires_grad,
                before[bias.0].requires_grad,
            );
            if let Some(gi) = grads.input {
                with_grad(before, *input, |_, g| {
                    for (a, b) in g.iter_mut().zip(&gi) {
                        *a += b;
                    }
                });
            }
            if let Some(gk) = grads.kernel {
                with_grad(before, *kernel, |_, g| {
                    for (a, b) in g.iter_mut().zip(&gk) {
                        *a += b;
                    }
                });
            }
            if let Some(gb) = grads.bias {
                with_grad(before, *bias, |_, g| {
                    for (a, b) in g.iter_mut().zip(&gb) {
                        *a += b;
                    }
                });
            }
        }
        Op::ConcatChannels { a, b } => {
            let (ba, ca, h, w) = before[a.0].value.dims4().expect("validated at build");
            let cb = before[b.0].value.shape()[1];
            let plane = h * w;
            let ctot = ca + cb;
            with_grad(before, *a, |_, g| {
                for bi in 0..ba {
                    let src = &gout[bi * ctot * plane..bi * ctot * plane + ca * plane];
                    for (gi, go) in g[bi * ca * plane..(bi + 1) * ca * plane].iter_mut().zip(src) {
                        *gi += go;
                    }
                }
            });
            with_grad(before, *b, |_, g| {
                for bi in 0..ba {
                    let src = &gout[bi * ctot * plane + ca * plane..(bi + 1) * ctot * plane];
                    for (gi, go) in g[bi * cb * plane..(bi + 1) * cb * plane].iter_mut().zip(src) {
                        *gi += go;
                    }
                }
            });
        }
        Op::BilinearResize { x } => {
            let (b, c, ih, iw) = before[x.0].value.dims4().expect("validated at build");
            let (oh, ow) = (out_value.shape()[2], out_value.shape()[3]);
            with_grad(before, *x, |_, g| {
                resize::bilinear_backward(gout, b * c, ih, iw, oh, ow, g);
            });
        }
        Op::CrossEntropy { logits, labels } => {
            let (b, c, h, w) = before[logits.0].value.dims4().expect("validated at build");
            with_grad(before, *logits, |nodes, g| {
                cross_entropy_backward(nodes[logits.0].value.data(), labels, b, c, h, w, gout[0], g);
            });
        }
        Op::SliceView { x, start } => {
            with_grad(before, *x, |_, g| {
                for (gi, go) in g[*start..*start + gout.len()].iter_mut().zip(gout) {
                    *gi += go;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_window_coverage() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let k_even = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let k_badc = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k_even, b), Err(TensorError::InvalidArg { .. })));
        assert!(matches!(g.conv2d(x, k_badc, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let x0 = g.constant(Tensor::zeros(vec![3, 2]));
        let bb = g.constant(t(&[2], &[0.5, -1.0]));
        let y0 = g.linear(x0, w, bb).unwrap();
        assert_eq!(g.value(y0).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 2.0, -3.0]), true);
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_eq!(g.value(y).data(), &[-0.01, 2.0, -0.03]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.01, 1.0, 0.01]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 4, 2, 2]));
        let loss = g.cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4.0f32.ln()).abs() < 1e-6);

        let mut data = vec![0.0f32; 3 * 4];
        // label channel gets +1e4 at every pixel
        for p in 0..4 {
            data[p] = 1e4;
        }
        let mut g2 = Graph::new();
        let hot = g2.constant(t(&[1, 3, 2, 2], &data));
        let loss2 = g2.cross_entropy(hot, &[0, 0, 0, 0]).unwrap();
        assert!(g2.value(loss2).data()[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![1, 3, 1, 1]));
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(TensorError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn concat_stacks_and_handles_empty() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let b = g.constant(Tensor::filled(vec![1, 1, 2, 2], 1.0));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 2, 2]);
        assert_eq!(&g.value(y).data()[8..], &[1.0; 4]);

        let empty = g.constant(Tensor::zeros(vec![1, 0, 2, 2]));
        let same = g.concat_channels(a, empty).unwrap();
        assert_eq!(g.value(same).shape(), &[1, 2, 2, 2]);
        assert_eq!(g.value(same).data(), g.value(a).data());
    }

    #[test]
    fn concat_gradient_splits_back() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::filled(vec![1, 2, 1, 2], 1.0), true);
        let b = g.leaf(Tensor::filled(vec![1, 1, 1, 2], 2.0), true);
        let y = g.concat_channels(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        // loss = sum(x^2) / 2 at x = [1, -2] -> grad [1, -2]
        let mut g2 = Graph::new();
        let x2 = g2.leaf(t(&[2], &[1.0, -2.0]), true);
        let sq = g2.mul(x2, x2).unwrap();
        let total = g2.sum(sq);
        let loss = g2.scale(total, 0.5);
        g2.backward(loss).unwrap();
        assert_eq!(g2.grad(x2).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_on_detached_tensor_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(TensorError::Detached)));
    }

    #[test]
    fn backward_scaling_is_linear() {
        let run = |a: f32| {
            let mut g = Graph::new();
            let x = g.leaf(t(&[3], &[0.3, -1.2, 2.0]), true);
            let sq = g.mul(x, x).unwrap();
            let s = g.sum(sq);
            let loss = g.scale(s, a);
            g.backward(loss).unwrap();
            g.take_grad(x).unwrap()
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(a * 3.0, *b);
        }
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = g.leaf(t(&[3], &[1.0, 1.0, 1.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn view_slice_routes_gradient_into_range() {
        let mut g = Graph::new();
        let theta = g.leaf(t(&[6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let mid = g.view_slice(theta, 2, vec![1, 1, 1, 2]).unwrap();
        assert_eq!(g.value(mid).data(), &[2.0, 3.0]);
        let s = g.sum(mid);
        g.backward(s).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_identity_is_exact() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let y = g.bilinear_resize(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn mac_counter_counts_conv_products() {
        let mut g = Graph::new();
        g.enable_mac_counter();
        let x = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
        let k = g.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![3]));
        g.conv2d(x, k, b).unwrap();
        assert_eq!(g.macs(), Some(9 * 2 * 3 * 64));
    }
}
