//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a growable tape: every operation appends a node holding the
//! forward value and enough structure to push gradients back to its inputs.
//! The network code rebuilds the tape on every forward pass (define-by-run),
//! which keeps recurrent unrolling trivial.
//!
//! Conventions:
//! - activations are `[C, H, W]`, conv weights `[Cout, Cin, Kh, Kw]`,
//!   depthwise kernels `[C, Kh, Kw]`, vectors `[C]`, scalars `[1]`;
//! - all convolutions use same-padding with an odd kernel;
//! - shape violations are programming errors and panic; fallible validation
//!   belongs to the public entry points that feed the graph.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Reflect,
    Zero,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    PowScalar(ValueId, f64),
    Ln { x: ValueId, floor: f64 },
    Abs(ValueId),
    Relu(ValueId),
    LeakyRelu(ValueId, f64),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Prelu { x: ValueId, alpha: ValueId },
    Clamp01(ValueId),
    AddBias { x: ValueId, bias: ValueId },
    ScaleChannels { x: ValueId, scale: ValueId },
    MulMask { x: ValueId, mask: ValueId },
    Concat(Vec<ValueId>),
    SliceChannels { x: ValueId, start: usize, len: usize },
    Conv2d { x: ValueId, w: ValueId, b: Option<ValueId>, stride: usize, pad: PadMode },
    DepthwiseConv2d { x: ValueId, w: ValueId, pad: PadMode },
    ResizeBilinear { x: ValueId },
    MeanAll(ValueId),
    SumAll(ValueId),
    GlobalAvgPool(ValueId),
    GlobalMaxPool(ValueId),
    SpatialMeanC(ValueId),
    SpatialMaxC(ValueId),
    Linear { x: ValueId, w: ValueId, b: Option<ValueId> },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph { nodes: Vec::new(), training }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("graph value read after retain_only freed it")
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> ValueId {
        let requires_grad = requires_grad && self.training;
        self.nodes.push(Node { op, value: Some(value), grad: None, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Insert a leaf holding `t`. `requires_grad` marks it as a target for
    /// [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> ValueId {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Leaf that never receives a gradient (fixed kernels, ground truth, ...).
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Leaf, t, false)
    }

    /// Drop the stored values of every node not listed in `keep`, bounding
    /// memory during long gradient-free forward passes. No-op while training
    /// (backward needs the tape intact).
    pub fn retain_only(&mut self, keep: &[ValueId]) {
        if self.training {
            return;
        }
        let mut keep_flags = vec![false; self.nodes.len()];
        for id in keep {
            keep_flags[id.0] = true;
        }
        for (node, keep) in self.nodes.iter_mut().zip(keep_flags) {
            if !keep {
                node.value = None;
            }
        }
    }

    /// Drop specific stored values (block-local temporaries that have no
    /// further readers). No-op while training.
    pub fn free_values(&mut self, dead: &[ValueId]) {
        if self.training {
            return;
        }
        for id in dead {
            self.nodes[id.0].value = None;
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.any_grad(&[a, b]);
        self.push(Op::Div(a, b), v, rg)
    }

    pub fn scale(&mut self, x: ValueId, k: f64) -> ValueId {
        let v = self.value(x).map(|v| v * k);
        let rg = self.any_grad(&[x]);
        self.push(Op::Scale(x, k), v, rg)
    }

    pub fn add_scalar(&mut self, x: ValueId, k: f64) -> ValueId {
        let v = self.value(x).map(|v| v + k);
        let rg = self.any_grad(&[x]);
        self.push(Op::AddScalar(x), v, rg)
    }

    /// Elementwise `max(x, 0)^p`.
    pub fn pow_scalar(&mut self, x: ValueId, p: f64) -> ValueId {
        let v = self.value(x).map(|v| v.max(0.0).powf(p));
        let rg = self.any_grad(&[x]);
        self.push(Op::PowScalar(x, p), v, rg)
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn ln(&mut self, x: ValueId, floor: f64) -> ValueId {
        assert!(floor > 0.0);
        let v = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.any_grad(&[x]);
        self.push(Op::Ln { x, floor }, v, rg)
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::abs);
        let rg = self.any_grad(&[x]);
        self.push(Op::Abs(x), v, rg)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f64) -> ValueId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(Op::LeakyRelu(x, slope), v, rg)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(Op::Sigmoid(x), v, rg)
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(Op::Tanh(x), v, rg)
    }

    /// PReLU with a single learnable slope (`alpha` is a `[1]` tensor).
    pub fn prelu(&mut self, x: ValueId, alpha: ValueId) -> ValueId {
        assert_eq!(self.shape(alpha), &[1], "prelu alpha must be scalar");
        let a = self.value(alpha).item();
        let v = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        let rg = self.any_grad(&[x, alpha]);
        self.push(Op::Prelu { x, alpha }, v, rg)
    }

    /// Hard clamp to [0, 1]; gradient passes only strictly inside the range.
    pub fn clamp01(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let rg = self.any_grad(&[x]);
        self.push(Op::Clamp01(x), v, rg)
    }

    // ---- broadcasting helpers ----

    /// `x: [C,H,W] + bias[C]` broadcast over the spatial plane.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(bias), &[c], "bias length mismatch");
        let mut out = self.value(x).clone();
        {
            let b = self.value(bias).data().to_vec();
            let plane = h * w;
            for (ci, bv) in b.iter().enumerate() {
                for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
                    *v += bv;
                }
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(Op::AddBias { x, bias }, out, rg)
    }

    /// `x: [C,H,W] * scale[C]` broadcast over the spatial plane.
    pub fn scale_channels(&mut self, x: ValueId, scale: ValueId) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(scale), &[c], "channel scale length mismatch");
        let mut out = self.value(x).clone();
        {
            let s = self.value(scale).data().to_vec();
            let plane = h * w;
            for (ci, sv) in s.iter().enumerate() {
                for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
                    *v *= sv;
                }
            }
        }
        let rg = self.any_grad(&[x, scale]);
        self.push(Op::ScaleChannels { x, scale }, out, rg)
    }

    /// `x: [C,H,W] * mask[1,H,W]` broadcast over channels.
    pub fn mul_mask(&mut self, x: ValueId, mask: ValueId) -> ValueId {
        let (_, h, w) = self.value(x).chw();
        assert_eq!(self.shape(mask), &[1, h, w], "mask shape mismatch");
        let plane = h * w;
        let mut out = self.value(x).clone();
        {
            let m = self.value(mask).data().to_vec();
            for chunk in out.data_mut().chunks_mut(plane) {
                for (v, mv) in chunk.iter_mut().zip(m.iter()) {
                    *v *= mv;
                }
            }
        }
        let rg = self.any_grad(&[x, mask]);
        self.push(Op::MulMask { x, mask }, out, rg)
    }

    // ---- structure ----

    pub fn concat(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c_total = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c_total += pc;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![c_total, h, w], data).unwrap();
        let rg = self.any_grad(parts);
        self.push(Op::Concat(parts.to_vec()), v, rg)
    }

    pub fn slice_channels(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        let data = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let v = Tensor::new(vec![len, h, w], data).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Op::SliceChannels { x, start, len }, v, rg)
    }

    // ---- convolutions ----

    /// Same-padded 2D convolution. `w: [Cout, Cin, Kh, Kw]`, odd kernel.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: PadMode,
    ) -> ValueId {
        let v = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut ids = vec![x, w];
        if let Some(b) = b {
            ids.push(b);
        }
        let rg = self.any_grad(&ids);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v, rg)
    }

    /// Per-channel (depthwise) convolution, stride 1. `w: [C, Kh, Kw]`.
    pub fn depthwise_conv2d(&mut self, x: ValueId, w: ValueId, pad: PadMode) -> ValueId {
        let v = depthwise_forward(self.value(x), self.value(w), pad);
        let rg = self.any_grad(&[x, w]);
        self.push(Op::DepthwiseConv2d { x, w, pad }, v, rg)
    }

    // ---- resampling ----

    /// Corner-aligned bilinear resize to `(h, w)`.
    pub fn resize_bilinear(&mut self, x: ValueId, h: usize, w: usize) -> ValueId {
        assert!(h > 0 && w > 0, "resize to zero dimension");
        let v = resize_forward(self.value(x), h, w);
        let rg = self.any_grad(&[x]);
        self.push(Op::ResizeBilinear { x }, v, rg)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push(Op::MeanAll(x), v, rg)
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(Op::SumAll(x), v, rg)
    }

    /// `[C,H,W] -> [C]` spatial mean per channel.
    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        let plane = (h * w) as f64;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / plane)
            .collect();
        let v = Tensor::new(vec![c], data).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Op::GlobalAvgPool(x), v, rg)
    }

    /// `[C,H,W] -> [C]` spatial max per channel.
    pub fn global_max_pool(&mut self, x: ValueId) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .collect();
        let v = Tensor::new(vec![c], data).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Op::GlobalMaxPool(x), v, rg)
    }

    /// `[C,H,W] -> [1,H,W]` mean across channels.
    pub fn spatial_mean_channels(&mut self, x: ValueId) -> ValueId {
        let (c, h, w) = self.value(x).chw();
        let plane = h * w;
        let mut data = vec![0.0; plane];
        for ch in self.value(x).data().chunks(plane) {
            for (d, v) in data.iter_mut().zip(ch.iter()) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= c as f64;
        }
        let v = Tensor::new(vec![1, h, w], data).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Op::SpatialMeanC(x), v, rg)
    }

    /// `[C,H,W] -> [1,H,W]` max across channels.
    pub fn spatial_max_channels(&mut self, x: ValueId) -> ValueId {
        let (_, h, w) = self.value(x).chw();
        let plane = h * w;
        let mut data = vec![f64::NEG_INFINITY; plane];
        for ch in self.value(x).data().chunks(plane) {
            for (d, v) in data.iter_mut().zip(ch.iter()) {
                *d = d.max(*v);
            }
        }
        let v = Tensor::new(vec![1, h, w], data).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Op::SpatialMaxC(x), v, rg)
    }

    /// Dense layer on a `[Cin]` vector: `w: [Cout, Cin]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> ValueId {
        let xs = self.value(x).data().to_vec();
        let wt = self.value(w);
        let (co, ci) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xs.len(), ci, "linear input length mismatch");
        let wd = wt.data().to_vec();
        let mut out: Vec<f64> = (0..co)
            .map(|o| {
                wd[o * ci..(o + 1) * ci]
                    .iter()
                    .zip(xs.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![co], out).unwrap();
        let mut ids = vec![x, w];
        if let Some(b) = b {
            ids.push(b);
        }
        let rg = self.any_grad(&ids);
        self.push(Op::Linear { x, w, b }, v, rg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Gradients accumulate on every node
    /// with `requires_grad`; fetch them with [`Graph::grad`].
    pub fn backward(&mut self, loss: ValueId) {
        assert!(self.training, "backward on an inference graph");
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.backprop_node(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
    }

    fn accumulate(&mut self, id: ValueId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(b), |gv, bv| gv * bv);
                let db = g.zip_map(self.value(a), |gv, av| gv * av);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Div(a, b) => {
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                let da = g.zip_map(&bv, |gv, b| gv / b);
                let db = Tensor::from_fn(bv.shape(), |i| {
                    -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i])
                });
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(x, k) => self.accumulate(x, g.map(|v| v * k)),
            Op::AddScalar(x) => self.accumulate(x, g.clone()),
            Op::PowScalar(x, p) => {
                let dx = g.zip_map(self.value(x), |gv, xv| {
                    if xv > 0.0 {
                        gv * p * xv.powf(p - 1.0)
                    } else {
                        0.0
                    }
                });
                self.accumulate(x, dx);
            }
            Op::Ln { x, floor } => {
                let dx = g.zip_map(self.value(x), |gv, xv| if xv > floor { gv / xv } else { 0.0 });
                self.accumulate(x, dx);
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let dx =
                    g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let dx = g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(x, dx);
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let dx = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv));
                self.accumulate(x, dx);
            }
            Op::Prelu { x, alpha } => {
                let a = self.value(alpha).item();
                let xv = self.value(x).clone();
                let dx = g.zip_map(&xv, |gv, v| if v > 0.0 { gv } else { a * gv });
                let da: f64 = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| if v < 0.0 { gv * v } else { 0.0 })
                    .sum();
                self.accumulate(x, dx);
                self.accumulate(alpha, Tensor::scalar(da));
            }
            Op::Clamp01(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| {
                    if xv > 0.0 && xv < 1.0 {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(x, dx);
            }
            Op::AddBias { x, bias } => {
                let (c, h, w) = g.chw();
                let mut db = vec![0.0; c];
                for (ci, chunk) in g.data().chunks(h * w).enumerate() {
                    db[ci] = chunk.iter().sum();
                }
                self.accumulate(x, g.clone());
                self.accumulate(bias, Tensor::new(vec![c], db).unwrap());
            }
            Op::ScaleChannels { x, scale } => {
                let (c, h, w) = g.chw();
                let plane = h * w;
                let s = self.value(scale).data().to_vec();
                let xv = self.value(x).clone();
                let mut dx = g.clone();
                let mut ds = vec![0.0; c];
                for ci in 0..c {
                    let r = ci * plane..(ci + 1) * plane;
                    ds[ci] = g.data()[r.clone()]
                        .iter()
                        .zip(&xv.data()[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for v in &mut dx.data_mut()[r] {
                        *v *= s[ci];
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(scale, Tensor::new(vec![c], ds).unwrap());
            }
            Op::MulMask { x, mask } => {
                let (_, h, w) = g.chw();
                let plane = h * w;
                let m = self.value(mask).data().to_vec();
                let xv = self.value(x).clone();
                let mut dx = g.clone();
                let mut dm = vec![0.0; plane];
                for (ci, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    for (j, v) in chunk.iter_mut().enumerate() {
                        dm[j] += *v * xv.data()[ci * plane + j];
                        *v *= m[j];
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(mask, Tensor::new(vec![1, h, w], dm).unwrap());
            }
            Op::Concat(parts) => {
                let (_, h, w) = g.chw();
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(p)[0];
                    let dp = Tensor::new(
                        vec![pc, h, w],
                        g.data()[offset * plane..(offset + pc) * plane].to_vec(),
                    )
                    .unwrap();
                    offset += pc;
                    self.accumulate(p, dp);
                }
            }
            Op::SliceChannels { x, start, len } => {
                let (c, h, w) = self.value(x).chw();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                dx.data_mut()[start * plane..(start + len) * plane].copy_from_slice(g.data());
                self.accumulate(x, dx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.requires_grad(x),
                    self.requires_grad(w),
                    b.map_or(false, |b| self.requires_grad(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(b, db);
                }
            }
            Op::DepthwiseConv2d { x, w, pad } => {
                let (dx, dw) = depthwise_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    pad,
                    self.requires_grad(x),
                    self.requires_grad(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, dw);
                }
            }
            Op::ResizeBilinear { x } => {
                let dx = resize_backward(self.value(x).shape(), g);
                self.accumulate(x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(x).numel() as f64;
                let gv = g.item() / n;
                let dx = Tensor::full(self.value(x).shape(), gv);
                self.accumulate(x, dx);
            }
            Op::SumAll(x) => {
                let dx = Tensor::full(self.value(x).shape(), g.item());
                self.accumulate(x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(x).chw();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gv = g.data()[ci] / plane as f64;
                    for v in &mut dx.data_mut()[ci * plane..(ci + 1) * plane] {
                        *v = gv;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::GlobalMaxPool(x) => {
                let xv = self.value(x).clone();
                let (c, h, w) = xv.chw();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let chunk = &xv.data()[ci * plane..(ci + 1) * plane];
                    let mut best = 0;
                    for (j, v) in chunk.iter().enumerate() {
                        if *v > chunk[best] {
                            best = j;
                        }
                    }
                    dx.data_mut()[ci * plane + best] = g.data()[ci];
                }
                self.accumulate(x, dx);
            }
            Op::SpatialMeanC(x) => {
                let (c, h, w) = self.value(x).chw();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for j in 0..plane {
                        dx.data_mut()[ci * plane + j] = g.data()[j] / c as f64;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::SpatialMaxC(x) => {
                let xv = self.value(x).clone();
                let (c, h, w) = xv.chw();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for j in 0..plane {
                    let mut best = 0;
                    for ci in 1..c {
                        if xv.data()[ci * plane + j] > xv.data()[best * plane + j] {
                            best = ci;
                        }
                    }
                    dx.data_mut()[best * plane + j] = g.data()[j];
                }
                self.accumulate(x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(x).data().to_vec();
                let wt = self.value(w).clone();
                let (co, ci) = (wt.shape()[0], wt.shape()[1]);
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; ci];
                    for o in 0..co {
                        let gv = g.data()[o];
                        for (dxi, wv) in dx.iter_mut().zip(&wt.data()[o * ci..(o + 1) * ci]) {
                            *dxi += gv * wv;
                        }
                    }
                    self.accumulate(x, Tensor::new(vec![ci], dx).unwrap());
                }
                if self.requires_grad(w) {
                    let mut dw = vec![0.0; co * ci];
                    for o in 0..co {
                        let gv = g.data()[o];
                        for (dwi, xvi) in dw[o * ci..(o + 1) * ci].iter_mut().zip(&xv) {
                            *dwi = gv * xvi;
                        }
                    }
                    self.accumulate(w, Tensor::new(vec![co, ci], dw).unwrap());
                }
                if let Some(b) = b {
                    self.accumulate(b, g.clone());
                }
            }
        }
    }
}

// ---- convolution kernels -------------------------------------------------

fn pad_extents(kh: usize, kw: usize) -> (usize, usize) {
    assert!(kh % 2 == 1 && kw % 2 == 1, "convolution kernels must be odd-sized");
    (kh / 2, kw / 2)
}

/// Mirror index into [0, n) without repeating the edge sample. Folds as many
/// times as needed, so any pad width works on any size (n == 1 degenerates
/// to constant extension).
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Copy `x` into a `[C, H+2ph, W+2pw]` buffer with the requested border rule.
fn pad_input(x: &Tensor, ph: usize, pw: usize, pad: PadMode) -> Tensor {
    let (c, h, w) = x.chw();
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for yp in 0..hp {
            let ys = yp as isize - ph as isize;
            let row_valid = ys >= 0 && (ys as usize) < h;
            let ysrc = match pad {
                PadMode::Reflect => reflect_index(ys, h),
                PadMode::Zero => {
                    if row_valid {
                        ys as usize
                    } else {
                        continue; // row stays zero
                    }
                }
            };
            let src = &x.data()[ci * h * w + ysrc * w..ci * h * w + ysrc * w + w];
            let dst = &mut out.data_mut()[ci * hp * wp + yp * wp..ci * hp * wp + (yp + 1) * wp];
            match pad {
                PadMode::Reflect => {
                    for (xp, d) in dst.iter_mut().enumerate() {
                        let xs = xp as isize - pw as isize;
                        *d = src[reflect_index(xs, w)];
                    }
                }
                PadMode::Zero => {
                    dst[pw..pw + w].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Fold a gradient on the padded buffer back onto the source tensor,
/// accumulating mirrored cells into the pixels they were read from.
fn unpad_grad(gpad: &Tensor, shape: &[usize], ph: usize, pw: usize, pad: PadMode) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = Tensor::zeros(shape);
    for ci in 0..c {
        for yp in 0..hp {
            let ys = yp as isize - ph as isize;
            let ysrc = match pad {
                PadMode::Reflect => reflect_index(ys, h),
                PadMode::Zero => {
                    if ys < 0 || ys as usize >= h {
                        continue;
                    }
                    ys as usize
                }
            };
            for xp in 0..wp {
                let xs = xp as isize - pw as isize;
                let xsrc = match pad {
                    PadMode::Reflect => reflect_index(xs, w),
                    PadMode::Zero => {
                        if xs < 0 || xs as usize >= w {
                            continue;
                        }
                        xs as usize
                    }
                };
                out.data_mut()[ci * h * w + ysrc * w + xsrc] +=
                    gpad.data()[ci * hp * wp + yp * wp + xp];
            }
        }
    }
    out
}

fn conv_out_dim(n: usize, k: usize, p: usize, stride: usize) -> usize {
    (n + 2 * p - k) / stride + 1
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: PadMode,
) -> Tensor {
    let (ci, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,Kh,Kw]");
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(wci, ci, "conv in-channel mismatch");
    let (ph, pw) = pad_extents(kh, kw);
    let xp = pad_input(x, ph, pw, pad);
    let (hp, wp) = (h + 2 * ph, wd + 2 * pw);
    let (ho, wo) = (conv_out_dim(h, kh, ph, stride), conv_out_dim(wd, kw, pw, stride));
    let mut out = Tensor::zeros(&[co, ho, wo]);
    let wdat = w.data();
    let xdat = xp.data();
    // row-accumulator ordering: each output row is written once while the
    // kernel taps run as contiguous axpys over the padded input rows
    let mut acc = vec![0.0f64; wo];
    for o in 0..co {
        let bias = b.map_or(0.0, |b| b.data()[o]);
        for y in 0..ho {
            acc.iter_mut().for_each(|v| *v = bias);
            for c in 0..ci {
                let cbase = c * hp * wp;
                for ky in 0..kh {
                    let row_base = cbase + (y * stride + ky) * wp;
                    let wrow = &wdat[((o * ci + c) * kh + ky) * kw..((o * ci + c) * kh + ky) * kw + kw];
                    if stride == 1 && kw == 3 {
                        // fused taps: one pass per row, three reads per lane
                        let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                        let srow = &xdat[row_base..row_base + wo + 2];
                        for (i, av) in acc.iter_mut().enumerate() {
                            *av += w0 * srow[i] + w1 * srow[i + 1] + w2 * srow[i + 2];
                        }
                    } else if stride == 1 {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let srow = &xdat[row_base + kx..row_base + kx + wo];
                            for (av, sv) in acc.iter_mut().zip(srow) {
                                *av += wv * sv;
                            }
                        }
                    } else {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let base = row_base + kx;
                            for (xo, av) in acc.iter_mut().enumerate() {
                                *av += wv * xdat[base + xo * stride];
                            }
                        }
                    }
                }
            }
            out.data_mut()[o * ho * wo + y * wo..o * ho * wo + (y + 1) * wo]
                .copy_from_slice(&acc);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: PadMode,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (ci, h, wd) = x.chw();
    let ws = w.shape();
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ph, pw) = pad_extents(kh, kw);
    let (hp, wp) = (h + 2 * ph, wd + 2 * pw);
    let (_, ho, wo) = g.chw();
    let gdat = g.data();

    let db = if need_db {
        let mut db = vec![0.0; co];
        for (o, dbo) in db.iter_mut().enumerate() {
            *dbo = gdat[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        Some(Tensor::new(vec![co], db).unwrap())
    } else {
        None
    };

    let dw = if need_dw {
        let xp = pad_input(x, ph, pw, pad);
        let xdat = xp.data();
        let mut dw = Tensor::zeros(w.shape());
        let dwdat = dw.data_mut();
        for o in 0..co {
            let acc = &mut dwdat[o * ci * kh * kw..(o + 1) * ci * kh * kw];
            let gplane = &gdat[o * ho * wo..(o + 1) * ho * wo];
            for y in 0..ho {
                let grow = &gplane[y * wo..(y + 1) * wo];
                for c in 0..ci {
                    for ky in 0..kh {
                        let row_base = c * hp * wp + (y * stride + ky) * wp;
                        if stride == 1 && kw == 3 {
                            // wide independent partial sums per tap so the
                            // reductions are not one serial FP chain
                            let srow = &xdat[row_base..row_base + wo + 2];
                            let mut d = [[0.0f64; 8]; 3];
                            let mut chunks = grow.chunks_exact(8);
                            let mut i = 0;
                            for gch in chunks.by_ref() {
                                let s0 = &srow[i..i + 8];
                                let s1 = &srow[i + 1..i + 9];
                                let s2 = &srow[i + 2..i + 10];
                                for l in 0..8 {
                                    d[0][l] += gch[l] * s0[l];
                                    d[1][l] += gch[l] * s1[l];
                                    d[2][l] += gch[l] * s2[l];
                                }
                                i += 8;
                            }
                            for (l, gv) in chunks.remainder().iter().enumerate() {
                                d[0][0] += gv * srow[i + l];
                                d[1][0] += gv * srow[i + l + 1];
                                d[2][0] += gv * srow[i + l + 2];
                            }
                            let base = (c * kh + ky) * kw;
                            acc[base] += d[0].iter().sum::<f64>();
                            acc[base + 1] += d[1].iter().sum::<f64>();
                            acc[base + 2] += d[2].iter().sum::<f64>();
                        } else {
                            for kx in 0..kw {
                                let dot = if stride == 1 {
                                    let srow = &xdat[row_base + kx..row_base + kx + wo];
                                    grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>()
                                } else {
                                    grow.iter()
                                        .enumerate()
                                        .map(|(xo, gv)| gv * xdat[row_base + kx + xo * stride])
                                        .sum::<f64>()
                                };
                                acc[(c * kh + ky) * kw + kx] += dot;
                            }
                        }
                    }
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        let mut gpad = Tensor::zeros(&[ci, hp, wp]);
        let wdat = w.data();
        let mut acc = vec![0.0f64; wp];
        for c in 0..ci {
            for rp in 0..hp {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let mut touched = false;
                for ky in 0..kh {
                    let num = rp as isize - ky as isize;
                    if num < 0 || num as usize % stride != 0 {
                        continue;
                    }
                    let y = num as usize / stride;
                    if y >= ho {
                        continue;
                    }
                    touched = true;
                    for o in 0..co {
                        let grow = &gdat[o * ho * wo + y * wo..o * ho * wo + (y + 1) * wo];
                        let wrow =
                            &wdat[((o * ci + c) * kh + ky) * kw..((o * ci + c) * kh + ky) * kw + kw];
                        if stride == 1 && kw == 3 && wo >= 2 {
                            let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                            // interior lanes see all three taps; edges peel off
                            for (j2, av) in acc[2..wo].iter_mut().enumerate() {
                                *av += w0 * grow[j2 + 2] + w1 * grow[j2 + 1] + w2 * grow[j2];
                            }
                            acc[0] += w0 * grow[0];
                            acc[1] += w0 * grow[1] + w1 * grow[0];
                            acc[wo] += w1 * grow[wo - 1] + w2 * grow[wo - 2];
                            acc[wo + 1] += w2 * grow[wo - 1];
                        } else if stride == 1 {
                            for (kx, &wv) in wrow.iter().enumerate() {
                                for (av, gv) in acc[kx..kx + wo].iter_mut().zip(grow) {
                                    *av += wv * gv;
                                }
                            }
                        } else {
                            for (kx, &wv) in wrow.iter().enumerate() {
                                for (xo, gv) in grow.iter().enumerate() {
                                    acc[kx + xo * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
                if touched {
                    gpad.data_mut()[c * hp * wp + rp * wp..c * hp * wp + (rp + 1) * wp]
                        .copy_from_slice(&acc);
                }
            }
        }
        Some(unpad_grad(&gpad, x.shape(), ph, pw, pad))
    } else {
        None
    };

    (dx, dw, db)
}

fn depthwise_forward(x: &Tensor, w: &Tensor, pad: PadMode) -> Tensor {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 3, "depthwise weight must be [C,Kh,Kw]");
    assert_eq!(ws[0], c, "depthwise channel mismatch");
    let (kh, kw) = (ws[1], ws[2]);
    let (ph, pw) = pad_extents(kh, kw);
    let xp = pad_input(x, ph, pw, pad);
    let (hp, wp) = (h + 2 * ph, wd + 2 * pw);
    let mut out = Tensor::zeros(&[c, h, wd]);
    let xdat = xp.data();
    let wdat = w.data();
    for ci in 0..c {
        let oplane = &mut out.data_mut()[ci * h * wd..(ci + 1) * h * wd];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = wdat[(ci * kh + ky) * kw + kx];
                if wv == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let src_base = ci * hp * wp + (y + ky) * wp + kx;
                    let srow = &xdat[src_base..src_base + wd];
                    let orow = &mut oplane[y * wd..(y + 1) * wd];
                    for (ov, sv) in orow.iter_mut().zip(srow) {
                        *ov += wv * sv;
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    pad: PadMode,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, wd) = x.chw();
    let (kh, kw) = (w.shape()[1], w.shape()[2]);
    let (ph, pw) = pad_extents(kh, kw);
    let (hp, wp) = (h + 2 * ph, wd + 2 * pw);
    let gdat = g.data();

    let dw = if need_dw {
        let xp = pad_input(x, ph, pw, pad);
        let xdat = xp.data();
        let mut dw = Tensor::zeros(w.shape());
        for ci in 0..c {
            let gplane = &gdat[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let src_base = ci * hp * wp + (y + ky) * wp + kx;
                        acc += gplane[y * wd..(y + 1) * wd]
                            .iter()
                            .zip(&xdat[src_base..src_base + wd])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                    dw.data_mut()[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        let mut gpad = Tensor::zeros(&[c, hp, wp]);
        let gp = gpad.data_mut();
        let wdat = w.data();
        for ci in 0..c {
            let gplane = &gdat[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[(ci * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let dst_base = ci * hp * wp + (y + ky) * wp + kx;
                        let grow = &gplane[y * wd..(y + 1) * wd];
                        let drow = &mut gp[dst_base..dst_base + wd];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                }
            }
        }
        Some(unpad_grad(&gpad, x.shape(), ph, pw, pad))
    } else {
        None
    };

    (dx, dw)
}

// ---- bilinear resize -----------------------------------------------------

/// Source coordinate lattice for corner-aligned sampling: exact on constants
/// and on affine ramps, which the pyramid tests rely on.
fn resize_axis(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f64)> {
    (0..n_dst)
        .map(|i| {
            if n_dst == 1 || n_src == 1 {
                return (0, 0, 0.0);
            }
            let s = i as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64;
            let i0 = s.floor() as usize;
            let i0 = i0.min(n_src - 1);
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn resize_forward(x: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let ys = resize_axis(h, ho);
    let xs = resize_axis(w, wo);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out.data_mut()[ci * ho * wo..(ci + 1) * ho * wo];
        for (yo, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                oplane[yo * wo + xo] = top + fy * (bot - top);
            }
        }
    }
    out
}

fn resize_backward(in_shape: &[usize], g: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, ho, wo) = g.chw();
    let ys = resize_axis(h, ho);
    let xs = resize_axis(w, wo);
    let mut dx = Tensor::zeros(in_shape);
    for ci in 0..c {
        let gplane = &g.data()[ci * ho * wo..(ci + 1) * ho * wo];
        let dplane = &mut dx.data_mut()[ci * h * w..(ci + 1) * h * w];
        for (yo, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = gplane[yo * wo + xo];
                dplane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dplane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dplane[y1 * w + x0] += gv * fy * (1.0 - fx);
                dplane[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckSettings};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let x = rand_tensor(&[2, 6, 7], 1);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        // one-hot center taps mapping channel i -> i
        w.data_mut()[(0 * 2 + 0) * 9 + 4] = 1.0;
        w.data_mut()[(1 * 2 + 1) * 9 + 4] = 1.0;
        let mut g = Graph::new(false);
        let xi = g.constant(x.clone());
        let wi = g.constant(w);
        let y = g.conv2d(xi, wi, None, 1, PadMode::Reflect);
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_stride2_halves_even_dims() {
        let x = rand_tensor(&[3, 8, 12], 2);
        let w = rand_tensor(&[5, 3, 3, 3], 3);
        let mut g = Graph::new(false);
        let xi = g.constant(x);
        let wi = g.constant(w);
        let y = g.conv2d(xi, wi, None, 2, PadMode::Reflect);
        assert_eq!(g.shape(y), &[5, 4, 6]);
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        // independent re-computation with explicit loops and reflect indexing
        let x = rand_tensor(&[2, 5, 6], 4);
        let w = rand_tensor(&[3, 2, 3, 3], 5);
        let b = rand_tensor(&[3], 6);
        let mut g = Graph::new(false);
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(b.clone());
        let y = g.conv2d(xi, wi, Some(bi), 1, PadMode::Reflect);
        let (ci, h, wd) = x.chw();
        for o in 0..3 {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let sy = reflect_index(yy as isize + ky as isize - 1, h);
                                let sx = reflect_index(xx as isize + kx as isize - 1, wd);
                                acc += w.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                    * x.data()[c * h * wd + sy * wd + sx];
                            }
                        }
                    }
                    let got = g.value(y).data()[o * h * wd + yy * wd + xx];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {o},{yy},{xx}");
                }
            }
        }
    }

    #[test]
    fn resize_constant_and_ramp() {
        let c = Tensor::full(&[1, 8, 8], 0.37);
        let mut g = Graph::new(false);
        let ci = g.constant(c);
        let up = g.resize_bilinear(ci, 16, 16);
        assert!(g.value(up).data().iter().all(|&v| (v - 0.37).abs() < 1e-12));

        // affine ramp survives down-then-up exactly
        let ramp = Tensor::from_fn(&[1, 8, 8], |i| {
            let y = i / 8;
            let x = i % 8;
            0.1 * x as f64 + 0.05 * y as f64
        });
        let ri = g.constant(ramp.clone());
        let down = g.resize_bilinear(ri, 4, 4);
        let back = g.resize_bilinear(down, 8, 8);
        for (a, b) in g.value(back).data().iter().zip(ramp.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_smoke_mul_chain() {
        let mut g = Graph::new(true);
        let a = g.leaf(Tensor::scalar(3.0), true);
        let b = g.leaf(Tensor::scalar(4.0), true);
        let p = g.mul(a, b);
        let s = g.scale(p, 2.0);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap().item(), 8.0);
        assert_eq!(g.grad(b).unwrap().item(), 6.0);
    }

    // finite-difference checks for each op family

    fn fd_unary(name: &str, seed: u64, f: impl Fn(&mut Graph, ValueId) -> ValueId) {
        let x = rand_tensor(&[2, 4, 5], seed);
        let report = check_gradients(
            &[("x", x)],
            |g, ids| {
                let y = f(g, ids[0]);
                g.mean_all(y)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "{name}: {report}");
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_unary("relu", 11, |g, x| {
            // keep away from the kink
            let y = g.add_scalar(x, 0.1);
            g.relu(y)
        });
        fd_unary("leaky", 12, |g, x| g.leaky_relu(x, 0.2));
        fd_unary("sigmoid", 13, |g, x| g.sigmoid(x));
        fd_unary("tanh", 14, |g, x| g.tanh(x));
        fd_unary("abs", 15, |g, x| {
            let y = g.add_scalar(x, 2.0);
            g.abs(y)
        });
        fd_unary("pow", 16, |g, x| {
            let y = g.add_scalar(x, 1.5); // strictly positive
            g.pow_scalar(y, 2.2)
        });
        fd_unary("ln", 17, |g, x| {
            let y = g.add_scalar(x, 2.0);
            g.ln(y, 1e-8)
        });
        fd_unary("scale", 18, |g, x| g.scale(x, -1.7));
        fd_unary("clamp_inside", 19, |g, x| {
            let y = g.scale(x, 0.3); // [-0.3, 0.3]
            let y = g.add_scalar(y, 0.5); // safely inside (0,1)
            g.clamp01(y)
        });
    }

    #[test]
    fn fd_binary_and_broadcast_ops() {
        let a = rand_tensor(&[2, 4, 4], 21);
        let b = rand_tensor(&[2, 4, 4], 22).map(|v| v + 3.0); // away from 0 for div
        let report = check_gradients(
            &[("a", a), ("b", b)],
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let d = g.div(ids[0], ids[1]);
                let m = g.mul(s, d);
                let sub = g.sub(m, ids[1]);
                g.mean_all(sub)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "binary: {report}");

        let x = rand_tensor(&[3, 4, 4], 23);
        let bias = rand_tensor(&[3], 24);
        let scale = rand_tensor(&[3], 25);
        let mask = rand_tensor(&[1, 4, 4], 26);
        let report = check_gradients(
            &[("x", x), ("bias", bias), ("scale", scale), ("mask", mask)],
            |g, ids| {
                let y = g.add_bias(ids[0], ids[1]);
                let y = g.scale_channels(y, ids[2]);
                let y = g.mul_mask(y, ids[3]);
                g.mean_all(y)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "broadcast: {report}");
    }

    #[test]
    fn fd_structure_ops() {
        let a = rand_tensor(&[2, 3, 4], 31);
        let b = rand_tensor(&[3, 3, 4], 32);
        let report = check_gradients(
            &[("a", a), ("b", b)],
            |g, ids| {
                let c = g.concat(&[ids[0], ids[1]]);
                let s = g.slice_channels(c, 1, 3);
                let t = g.tanh(s);
                g.mean_all(t)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "concat/slice: {report}");
    }

    #[test]
    fn fd_conv_ops() {
        for pad in [PadMode::Reflect, PadMode::Zero] {
            for stride in [1usize, 2] {
                let x = rand_tensor(&[2, 6, 6], 41);
                let w = rand_tensor(&[3, 2, 3, 3], 42);
                let b = rand_tensor(&[3], 43);
                let report = check_gradients(
                    &[("x", x), ("w", w), ("b", b)],
                    |g, ids| {
                        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
                        let y = g.tanh(y);
                        g.mean_all(y)
                    },
                    &GradCheckSettings::default(),
                );
                assert!(report.passed(), "conv stride={stride} pad={pad:?}: {report}");
            }
        }
        let x = rand_tensor(&[3, 6, 6], 44);
        let w = rand_tensor(&[3, 3, 3], 45);
        let report = check_gradients(
            &[("x", x), ("w", w)],
            |g, ids| {
                let y = g.depthwise_conv2d(ids[0], ids[1], PadMode::Reflect);
                let y = g.sigmoid(y);
                g.mean_all(y)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "depthwise: {report}");
    }

    #[test]
    fn fd_resize_and_reductions() {
        let x = rand_tensor(&[2, 6, 6], 51);
        let report = check_gradients(
            &[("x", x)],
            |g, ids| {
                let d = g.resize_bilinear(ids[0], 3, 3);
                let u = g.resize_bilinear(d, 6, 6);
                let m = g.mul(u, ids[0]);
                g.mean_all(m)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "resize: {report}");

        let x = rand_tensor(&[3, 4, 4], 52);
        let w = rand_tensor(&[2, 3], 53);
        let report = check_gradients(
            &[("x", x), ("w", w)],
            |g, ids| {
                let gap = g.global_avg_pool(ids[0]);
                let gmp = g.global_max_pool(ids[0]);
                let v = g.add(gap, gmp);
                let l = g.linear(v, ids[1], None);
                let sm = g.spatial_mean_channels(ids[0]);
                let sx = g.spatial_max_channels(ids[0]);
                let sp = g.mul(sm, sx);
                let a = g.mean_all(sp);
                let bsum = g.sum_all(l);
                let b2 = g.scale(bsum, 0.05);
                g.add(a, b2)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "reductions: {report}");
    }

    #[test]
    fn fd_prelu() {
        let x = rand_tensor(&[2, 4, 4], 61);
        let alpha = Tensor::scalar(0.3);
        let report = check_gradients(
            &[("x", x), ("alpha", alpha)],
            |g, ids| {
                let y = g.prelu(ids[0], ids[1]);
                g.mean_all(y)
            },
            &GradCheckSettings::default(),
        );
        assert!(report.passed(), "prelu: {report}");
    }

    #[test]
    fn retain_only_frees_intermediates() {
        let mut g = Graph::new(false);
        let a = g.constant(Tensor::full(&[1, 4, 4], 1.0));
        let b = g.sigmoid(a);
        let c = g.tanh(b);
        g.retain_only(&[c]);
        assert!(std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| g.value(b))).is_err());
        assert!(g.value(c).all_finite());
    }

    #[test]
    fn zero_pad_differs_from_reflect_at_border() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut g = Graph::new(false);
        let xi = g.constant(x);
        let wi = g.constant(w);
        let yr = g.conv2d(xi, wi, None, 1, PadMode::Reflect);
        let yz = g.conv2d(xi, wi, None, 1, PadMode::Zero);
        assert_eq!(g.value(yr).data()[0], 9.0);
        assert_eq!(g.value(yz).data()[0], 4.0);
        // interior equal
        assert_eq!(g.value(yr).data()[12], g.value(yz).data()[12]);
    }

    #[test]
    fn random_rng_helper_is_stable() {
        let t1 = rand_tensor(&[2, 2, 2], 99);
        let t2 = rand_tensor(&[2, 2, 2], 99);
        assert_eq!(t1.data(), t2.data());
    }
}
