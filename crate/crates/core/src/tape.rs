//! Reverse-mode autodiff on an append-only arena. Every forward op pushes
//! one node; `backward` walks the arena in reverse. Producers always have
//! lower ids than consumers, so a single reverse sweep is a valid
//! topological order and the float accumulation order is fixed, which
//! makes replays bit identical.
//!
//! Gradients flow only where `requires_grad` says they should: a node
//! requires grad iff any input does, and backward skips inputs that do
//! not. Frozen subgraphs (a teacher network, constant targets) therefore
//! cost no gradient memory or compute.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(u32);

impl ValueId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape,
    SliceAxis { axis: usize, start: usize },
    Concat { axis: usize },
    /// out[m, c] = in[cell m]. Cells index (image, gy, gx) of an NCHW map.
    GatherCells { cells: Vec<(u32, u32, u32)> },
    Add,
    Sub,
    Mul,
    Div,
    MinElem,
    MaxElem,
    AddScalar,
    MulScalar(f64),
    Sigmoid,
    Silu,
    Relu,
    Exp,
    Log,
    Sqrt,
    Abs,
    SumAll,
    MeanAll,
    SumAxis { axis: usize },
    Matmul,
    Conv2d { geom: ConvGeom },
    MaxPool2d { argmax: Vec<u32> },
    UpsampleNearest2d { scale: usize },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    BceWithLogits,
    /// Normalizes by batch statistics; saves them for the running-stat
    /// update and for backward.
    BatchNormTrain { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    /// Normalizes by the captured running statistics (payload, not inputs:
    /// they are not differentiable).
    BatchNormEval { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    /// Per-channel batch mean and biased variance as a [2*C] value, kept
    /// differentiable w.r.t. the input.
    ChannelStats,
    FakeQuantize { bits: u32 },
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}


impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, shape: Vec<usize>, data: Vec<f64>) -> ValueId {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = match op {
            Op::Leaf => false, // overridden by leaf()
            _ => inputs.iter().any(|i| self.nodes[i.idx()].requires_grad),
        };
        self.nodes.push(Node { op, inputs, shape, data, requires_grad });
        ValueId((self.nodes.len() - 1) as u32)
    }

    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        let id = self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec());
        self.nodes[id.idx()].requires_grad = t.requires_grad;
        id
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, vec![], shape, data))
    }

    pub fn scalar_const(&mut self, v: f64) -> ValueId {
        self.push(Op::Leaf, vec![], vec![1], vec![v])
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    pub fn value_scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.idx()].data.len(), 1);
        self.nodes[id.idx()].data[0]
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        let n = &self.nodes[id.idx()];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    /// Gradient of the last backward() w.r.t. this node, if one flowed.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.idx()).and_then(|g| g.as_deref())
    }

    /// Batch statistics saved by a train-mode batchnorm node.
    pub fn bn_batch_stats(&self, id: ValueId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.idx()].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn check_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.nodes[a.idx()].shape != self.nodes[b.idx()].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.idx()].shape, self.nodes[b.idx()].shape),
            ));
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        op: Op,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ValueId> {
        self.check_same_shape(op_name, a, b)?;
        let shape = self.nodes[a.idx()].shape.clone();
        let data = self.nodes[a.idx()]
            .data
            .iter()
            .zip(&self.nodes[b.idx()].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, vec![a, b], shape, data))
    }

    fn unary_elementwise(
        &mut self,
        op: Op,
        a: ValueId,
        f: impl Fn(f64) -> f64,
    ) -> ValueId {
        let shape = self.nodes[a.idx()].shape.clone();
        let data = self.nodes[a.idx()].data.iter().map(|&x| f(x)).collect();
        self.push(op, vec![a], shape, data)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("min_elem", Op::MinElem, a, b, f64::min)
    }

    pub fn max_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("max_elem", Op::MaxElem, a, b, f64::max)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        self.unary_elementwise(Op::AddScalar, a, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        self.unary_elementwise(Op::MulScalar(c), a, |x| x * c)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Sigmoid, a, sigmoid)
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Silu, a, |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Log, a, f64::ln)
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Sqrt, a, f64::sqrt)
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        self.unary_elementwise(Op::Abs, a, f64::abs)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.nodes[a.idx()].data.iter().sum();
        self.push(Op::SumAll, vec![a], vec![1], vec![s])
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.nodes[a.idx()].data.len() as f64;
        let s: f64 = self.nodes[a.idx()].data.iter().sum();
        self.push(Op::MeanAll, vec![a], vec![1], vec![s / n])
    }

    /// Sum along one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.nodes[a.idx()].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let src = &self.nodes[a.idx()].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        Ok(self.push(Op::SumAxis { axis }, vec![a], out_shape, data))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if numel(&shape) != self.nodes[a.idx()].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[a.idx()].shape, shape),
            ));
        }
        let data = self.nodes[a.idx()].data.clone();
        Ok(self.push(Op::Reshape, vec![a], shape, data))
    }

    /// Slice [start, start+len) along `axis`.
    pub fn slice_axis(&mut self, a: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let shape = self.nodes[a.idx()].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "slice_axis",
                format!("axis {axis} range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = &self.nodes[a.idx()].data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        Ok(self.push(Op::SliceAxis { axis, start }, vec![a], out_shape, data))
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[parts[0].idx()].shape.clone();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} of {:?}", first)));
        }
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p.idx()].shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let ext = self.nodes[p.idx()].shape[axis];
                let src = &self.nodes[p.idx()].data;
                let base = o * ext * inner;
                data.extend_from_slice(&src[base..base + ext * inner]);
            }
        }
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), out_shape, data))
    }

    /// Pick (image, gy, gx) cells out of an [N, C, G, G] map as [M, C] rows.
    pub fn gather_cells(&mut self, a: ValueId, cells: &[(u32, u32, u32)]) -> Result<ValueId> {
        let shape = self.nodes[a.idx()].shape.clone();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::shape("gather_cells", format!("want [N,C,G,G], got {:?}", shape)));
        }
        let (n, c, g) = (shape[0], shape[1], shape[2]);
        for &(ni, gy, gx) in cells {
            if ni as usize >= n || gy as usize >= g || gx as usize >= g {
                return Err(Error::invalid(
                    "gather_cells",
                    format!("cell ({ni},{gy},{gx}) outside [{n},{g},{g}]"),
                ));
            }
        }
        let src = &self.nodes[a.idx()].data;
        let mut data = Vec::with_capacity(cells.len() * c);
        for &(ni, gy, gx) in cells {
            let (ni, gy, gx) = (ni as usize, gy as usize, gx as usize);
            for ch in 0..c {
                data.push(src[((ni * c + ch) * g + gy) * g + gx]);
            }
        }
        let m = cells.len();
        Ok(self.push(Op::GatherCells { cells: cells.to_vec() }, vec![a], vec![m, c], data))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.nodes[a.idx()].shape.clone();
        let sb = self.nodes[b.idx()].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::mm_nn(&self.nodes[a.idx()].data, &self.nodes[b.idx()].data, m, k, n);
        Ok(self.push(Op::Matmul, vec![a, b], vec![m, n], data))
    }

    /// 2d convolution over [N, Cin, H, W] with kernel [Cout, Cin, k, k]
    /// and optional bias [Cout].
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let sx = self.nodes[x.idx()].shape.clone();
        let sw = self.nodes[w.idx()].shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("x {:?} w {:?}", sx, sw)));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} on {}x{}", sw[2], sx[2], sx[3]),
            ));
        }
        if let Some(b) = bias {
            let sb = &self.nodes[b.idx()].shape;
            if sb.as_slice() != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for cout {}", sb, sw[0])));
            }
        }
        let (n, cout) = (sx[0], sw[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad);
        let (hw, ckk) = (geom.col_cols(), geom.col_rows());
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; n * cout * hw];
        let img_len = geom.cin * geom.hin * geom.win;
        for i in 0..n {
            let img = &self.nodes[x.idx()].data[i * img_len..(i + 1) * img_len];
            kernels::im2col(img, &geom, &mut cols);
            let dst = &mut out[i * cout * hw..(i + 1) * cout * hw];
            kernels::mm_nn_acc(&self.nodes[w.idx()].data, &cols, dst, cout, ckk, hw);
            if let Some(b) = bias {
                let bv = &self.nodes[b.idx()].data;
                for c in 0..cout {
                    let row = &mut dst[c * hw..(c + 1) * hw];
                    for v in row {
                        *v += bv[c];
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(Op::Conv2d { geom }, inputs, vec![n, cout, geom.hout, geom.wout], out))
    }

    pub fn maxpool2d(&mut self, x: ValueId, k: usize, stride: usize) -> Result<ValueId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("maxpool2d", format!("k {k} stride {stride} on {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let src = &self.nodes[x.idx()].data;
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for img in 0..n * c {
            let plane = &src[img * h * w..(img + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let v = plane[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = (img * h * w + iy * w + ix) as u32;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x], vec![n, c, ho, wo], data))
    }

    pub fn upsample_nearest2d(&mut self, x: ValueId, scale: usize) -> Result<ValueId> {
        let s = self.nodes[x.idx()].shape.clone();
        if s.len() != 4 || scale == 0 {
            return Err(Error::shape("upsample_nearest2d", format!("scale {scale} on {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * scale, w * scale);
        let src = &self.nodes[x.idx()].data;
        let mut data = vec![0.0; n * c * ho * wo];
        for img in 0..n * c {
            let plane = &src[img * h * w..(img + 1) * h * w];
            let dst = &mut data[img * ho * wo..(img + 1) * ho * wo];
            for oy in 0..ho {
                let iy = oy / scale;
                for ox in 0..wo {
                    dst[oy * wo + ox] = plane[iy * w + ox / scale];
                }
            }
        }
        Ok(self.push(Op::UpsampleNearest2d { scale }, vec![x], vec![n, c, ho, wo], data))
    }

    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: ValueId, axis: usize, log: bool) -> Result<ValueId> {
        let shape = self.nodes[a.idx()].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.idx()].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for e in 0..extent {
                    m = m.max(src[at(e)]);
                }
                let mut z = 0.0;
                for e in 0..extent {
                    z += (src[at(e)] - m).exp();
                }
                let lz = z.ln();
                for e in 0..extent {
                    let centered = src[at(e)] - m;
                    data[at(e)] = if log { centered - lz } else { (centered - lz).exp() };
                }
            }
        }
        let op = if log { Op::LogSoftmax { axis } } else { Op::Softmax { axis } };
        Ok(self.push(op, vec![a], shape, data))
    }

    /// Elementwise binary cross entropy on logits:
    /// bce(x, t) = max(x,0) - x*t + ln(1 + e^-|x|). Not reduced.
    pub fn bce_with_logits(&mut self, logits: ValueId, targets: ValueId) -> Result<ValueId> {
        self.binary_elementwise("bce_with_logits", Op::BceWithLogits, logits, targets, |x, t| {
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
    }

    /// Train-mode batchnorm over [N, C, H, W]: normalize by batch mean and
    /// biased batch variance, then scale/shift by gamma/beta [C].
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let (shape, c) = self.bn_check("batchnorm_train", x, gamma, beta)?;
        let (mean, var) = channel_moments(&self.nodes[x.idx()].data, &shape);
        let data = bn_normalize(
            &self.nodes[x.idx()].data,
            &shape,
            &mean,
            &var,
            &self.nodes[gamma.idx()].data,
            &self.nodes[beta.idx()].data,
            eps,
        );
        let _ = c;
        Ok(self.push(Op::BatchNormTrain { eps, mean, var }, vec![x, gamma, beta], shape, data))
    }

    /// Eval-mode batchnorm: normalize by the provided running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<ValueId> {
        let (shape, c) = self.bn_check("batchnorm_eval", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm_eval",
                format!("running stats {}x{} for C={}", running_mean.len(), running_var.len(), c),
            ));
        }
        let data = bn_normalize(
            &self.nodes[x.idx()].data,
            &shape,
            running_mean,
            running_var,
            &self.nodes[gamma.idx()].data,
            &self.nodes[beta.idx()].data,
            eps,
        );
        let op = Op::BatchNormEval {
            eps,
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
        };
        Ok(self.push(op, vec![x, gamma, beta], shape, data))
    }

    fn bn_check(
        &self,
        op: &'static str,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(Vec<usize>, usize)> {
        let shape = self.nodes[x.idx()].shape.clone();
        if shape.len() != 4 {
            return Err(Error::shape(op, format!("want [N,C,H,W], got {:?}", shape)));
        }
        let c = shape[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.idx()].shape;
            if s.as_slice() != [c] {
                return Err(Error::shape(op, format!("{name} {:?} for C={}", s, c)));
            }
        }
        Ok((shape, c))
    }

    /// Per-channel mean then biased variance of an [N, C, H, W] input,
    /// flattened to [2*C]. Differentiable, for statistic-matching losses.
    pub fn channel_stats(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.nodes[x.idx()].shape.clone();
        if shape.len() != 4 {
            return Err(Error::shape("channel_stats", format!("want [N,C,H,W], got {:?}", shape)));
        }
        let (mean, var) = channel_moments(&self.nodes[x.idx()].data, &shape);
        let c = shape[1];
        let mut data = mean;
        data.extend_from_slice(&var);
        Ok(self.push(Op::ChannelStats, vec![x], vec![2 * c], data))
    }

    /// Fake quantization with straight-through gradients. `step` is a
    /// one-element value (> 0), `offset` likewise when present. `bits` of
    /// 32 passes through untouched.
    pub fn fake_quantize(
        &mut self,
        x: ValueId,
        step: ValueId,
        offset: Option<ValueId>,
        bits: u32,
    ) -> Result<ValueId> {
        if bits != 32 && !(2..=16).contains(&bits) {
            return Err(Error::invalid("fake_quantize", format!("bits {bits}")));
        }
        for (name, id) in [("step", Some(step)), ("offset", offset)] {
            if let Some(id) = id {
                if self.nodes[id.idx()].shape.as_slice() != [1] {
                    return Err(Error::shape(
                        "fake_quantize",
                        format!("{name} must be [1], got {:?}", self.nodes[id.idx()].shape),
                    ));
                }
            }
        }
        let shape = self.nodes[x.idx()].shape.clone();
        if bits == 32 {
            let data = self.nodes[x.idx()].data.clone();
            return Ok(self.push(Op::FakeQuantize { bits }, vec![x], shape, data));
        }
        let s = self.nodes[step.idx()].data[0];
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid("fake_quantize", format!("step must be finite and > 0, got {s}")));
        }
        let beta = offset.map(|o| self.nodes[o.idx()].data[0]).unwrap_or(0.0);
        let (q_min, q_max) = quant_range(bits);
        let data = self.nodes[x.idx()]
            .data
            .iter()
            .map(|&v| {
                let q = ((v - beta) / s).round().clamp(q_min, q_max);
                q * s + beta
            })
            .collect();
        let mut inputs = vec![x, step];
        if let Some(o) = offset {
            inputs.push(o);
        }
        Ok(self.push(Op::FakeQuantize { bits }, inputs, shape, data))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// node on a differentiable path; query them with `grad`.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let ln = &self.nodes[loss.idx()];
        if ln.data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", ln.shape),
            ));
        }
        if !ln.requires_grad {
            return Err(Error::invalid("backward", "loss does not depend on any differentiable leaf"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);
        for i in (0..=loss.idx()).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]).expect("checked above");
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn ensure_grad<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        id: ValueId,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[id.idx()].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let input = |k: usize| -> &Node { &self.nodes[node.inputs[k].idx()] };
        match &node.op {
            Op::Leaf => {}
            Op::Reshape => {
                if self.wants_grad(node.inputs[0]) {
                    let n = input(0).data.len();
                    let dst = Self::ensure_grad(grads, node.inputs[0], n);
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SliceAxis { axis, start } => {
                if self.wants_grad(node.inputs[0]) {
                    let in_shape = &input(0).shape;
                    let (outer, extent, inner) = split_axis(in_shape, *axis);
                    let len = node.shape[*axis];
                    let dst = Self::ensure_grad(grads, node.inputs[0], input(0).data.len());
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = (o * extent + start) * inner;
                        for (j, &gv) in src.iter().enumerate() {
                            dst[base + j] += gv;
                        }
                    }
                }
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offsets = Vec::with_capacity(node.inputs.len());
                let mut acc = 0;
                for &p in &node.inputs {
                    offsets.push(acc);
                    acc += self.nodes[p.idx()].shape[*axis];
                }
                let total = acc;
                for (pi, &p) in node.inputs.iter().enumerate() {
                    if !self.wants_grad(p) {
                        continue;
                    }
                    let ext = self.nodes[p.idx()].shape[*axis];
                    let dst = Self::ensure_grad(grads, p, self.nodes[p.idx()].data.len());
                    for o in 0..outer {
                        let src_base = (o * total + offsets[pi]) * inner;
                        let dst_base = o * ext * inner;
                        for j in 0..ext * inner {
                            dst[dst_base + j] += g[src_base + j];
                        }
                    }
                }
            }
            Op::GatherCells { cells } => {
                if self.wants_grad(node.inputs[0]) {
                    let shape = &input(0).shape;
                    let (c, gsz) = (shape[1], shape[2]);
                    let dst = Self::ensure_grad(grads, node.inputs[0], input(0).data.len());
                    for (m, &(ni, gy, gx)) in cells.iter().enumerate() {
                        let (ni, gy, gx) = (ni as usize, gy as usize, gx as usize);
                        for ch in 0..c {
                            dst[((ni * c + ch) * gsz + gy) * gsz + gx] += g[m * c + ch];
                        }
                    }
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if self.wants_grad(node.inputs[k]) {
                        let dst = Self::ensure_grad(grads, node.inputs[k], g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub => {
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.wants_grad(node.inputs[1]) {
                    let dst = Self::ensure_grad(grads, node.inputs[1], g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (&input(0).data, &input(1).data);
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * b[j];
                    }
                }
                if self.wants_grad(node.inputs[1]) {
                    let dst = Self::ensure_grad(grads, node.inputs[1], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * a[j];
                    }
                }
            }
            Op::Div => {
                let (a, b) = (&input(0).data, &input(1).data);
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] / b[j];
                    }
                }
                if self.wants_grad(node.inputs[1]) {
                    let dst = Self::ensure_grad(grads, node.inputs[1], g.len());
                    for j in 0..g.len() {
                        dst[j] -= g[j] * a[j] / (b[j] * b[j]);
                    }
                }
            }
            Op::MinElem | Op::MaxElem => {
                let take_a_on_max = matches!(node.op, Op::MaxElem);
                let (a, b) = (&input(0).data, &input(1).data);
                for j in 0..g.len() {
                    // ties go to the first operand
                    let a_wins = if take_a_on_max { a[j] >= b[j] } else { a[j] <= b[j] };
                    let k = if a_wins { 0 } else { 1 };
                    if self.wants_grad(node.inputs[k]) {
                        let dst = Self::ensure_grad(grads, node.inputs[k], g.len());
                        dst[j] += g[j];
                    }
                }
            }
            Op::AddScalar => {
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::MulScalar(c) => {
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::Sigmoid => {
                if self.wants_grad(node.inputs[0]) {
                    let y = &node.data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Silu => {
                if self.wants_grad(node.inputs[0]) {
                    let x = &input(0).data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        let s = sigmoid(x[j]);
                        dst[j] += g[j] * s * (1.0 + x[j] * (1.0 - s));
                    }
                }
            }
            Op::Relu => {
                if self.wants_grad(node.inputs[0]) {
                    let x = &input(0).data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            dst[j] += g[j];
                        }
                    }
                }
            }
            Op::Exp => {
                if self.wants_grad(node.inputs[0]) {
                    let y = &node.data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * y[j];
                    }
                }
            }
            Op::Log => {
                if self.wants_grad(node.inputs[0]) {
                    let x = &input(0).data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] / x[j];
                    }
                }
            }
            Op::Sqrt => {
                if self.wants_grad(node.inputs[0]) {
                    let y = &node.data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] / (2.0 * y[j]);
                    }
                }
            }
            Op::Abs => {
                if self.wants_grad(node.inputs[0]) {
                    let x = &input(0).data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        // subgradient 0 at the kink
                        dst[j] += g[j] * if x[j] > 0.0 { 1.0 } else if x[j] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::SumAll => {
                if self.wants_grad(node.inputs[0]) {
                    let n = input(0).data.len();
                    let dst = Self::ensure_grad(grads, node.inputs[0], n);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll => {
                if self.wants_grad(node.inputs[0]) {
                    let n = input(0).data.len();
                    let gv = g[0] / n as f64;
                    let dst = Self::ensure_grad(grads, node.inputs[0], n);
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumAxis { axis } => {
                if self.wants_grad(node.inputs[0]) {
                    let in_shape = &input(0).shape;
                    let (outer, extent, inner) = split_axis(in_shape, *axis);
                    let dst = Self::ensure_grad(grads, node.inputs[0], input(0).data.len());
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            for j in 0..inner {
                                dst[base + j] += src[j];
                            }
                        }
                    }
                }
            }
            Op::Matmul => {
                let (m, k) = (input(0).shape[0], input(0).shape[1]);
                let n = input(1).shape[1];
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], m * k);
                    kernels::mm_nt_acc(g, &input(1).data, dst, m, n, k);
                }
                if self.wants_grad(node.inputs[1]) {
                    let at = kernels::transpose(&input(0).data, m, k);
                    let dst = Self::ensure_grad(grads, node.inputs[1], k * n);
                    kernels::mm_nn_acc(&at, g, dst, k, m, n);
                }
            }
            Op::Conv2d { geom } => {
                self.conv2d_backward(node, geom, g, grads);
            }
            Op::MaxPool2d { argmax } => {
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], input(0).data.len());
                    for (j, &src_idx) in argmax.iter().enumerate() {
                        dst[src_idx as usize] += g[j];
                    }
                }
            }
            Op::UpsampleNearest2d { scale } => {
                if self.wants_grad(node.inputs[0]) {
                    let s = &input(0).shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (ho, wo) = (h * scale, w * scale);
                    let dst = Self::ensure_grad(grads, node.inputs[0], input(0).data.len());
                    for img in 0..n * c {
                        let gsrc = &g[img * ho * wo..(img + 1) * ho * wo];
                        let gdst = &mut dst[img * h * w..(img + 1) * h * w];
                        for oy in 0..ho {
                            let iy = oy / scale;
                            for ox in 0..wo {
                                gdst[iy * w + ox / scale] += gsrc[oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::Softmax { axis } => {
                if self.wants_grad(node.inputs[0]) {
                    let (outer, extent, inner) = split_axis(&node.shape, *axis);
                    let y = &node.data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let mut dot = 0.0;
                            for e in 0..extent {
                                dot += y[at(e)] * g[at(e)];
                            }
                            for e in 0..extent {
                                dst[at(e)] += y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { axis } => {
                if self.wants_grad(node.inputs[0]) {
                    let (outer, extent, inner) = split_axis(&node.shape, *axis);
                    let y = &node.data;
                    let dst = Self::ensure_grad(grads, node.inputs[0], y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |e: usize| (o * extent + e) * inner + i;
                            let mut gsum = 0.0;
                            for e in 0..extent {
                                gsum += g[at(e)];
                            }
                            for e in 0..extent {
                                dst[at(e)] += g[at(e)] - y[at(e)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits => {
                let (x, t) = (&input(0).data, &input(1).data);
                if self.wants_grad(node.inputs[0]) {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * (sigmoid(x[j]) - t[j]);
                    }
                }
                if self.wants_grad(node.inputs[1]) {
                    let dst = Self::ensure_grad(grads, node.inputs[1], g.len());
                    for j in 0..g.len() {
                        dst[j] -= g[j] * x[j];
                    }
                }
            }
            Op::BatchNormTrain { eps, mean, var } => {
                self.bn_train_backward(node, *eps, mean, var, g, grads);
            }
            Op::BatchNormEval { eps, mean, var } => {
                self.bn_eval_backward(node, *eps, mean, var, g, grads);
            }
            Op::ChannelStats => {
                if self.wants_grad(node.inputs[0]) {
                    let shape = &input(0).shape;
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let count = (n * h * w) as f64;
                    let x = &input(0).data;
                    let mean = &node.data[0..c];
                    let dst = Self::ensure_grad(grads, node.inputs[0], x.len());
                    for img in 0..n {
                        for ch in 0..c {
                            let gm = g[ch] / count;
                            let gv = g[c + ch] * 2.0 / count;
                            let base = (img * c + ch) * h * w;
                            for j in 0..h * w {
                                dst[base + j] += gm + gv * (x[base + j] - mean[ch]);
                            }
                        }
                    }
                }
            }
            Op::FakeQuantize { bits } => {
                if *bits == 32 {
                    if self.wants_grad(node.inputs[0]) {
                        let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    return;
                }
                let x = &input(0).data;
                let s = input(1).data[0];
                let beta = if node.inputs.len() == 3 { input(2).data[0] } else { 0.0 };
                let (q_min, q_max) = quant_range(*bits);
                // LSQ gradient scale stabilizes step updates across layer sizes
                let gscale = 1.0 / ((x.len() as f64) * q_max).sqrt();
                let mut ds = 0.0;
                let mut dbeta = 0.0;
                let want_x = self.wants_grad(node.inputs[0]);
                let mut dx = if want_x { vec![0.0; g.len()] } else { Vec::new() };
                for j in 0..g.len() {
                    let v = (x[j] - beta) / s;
                    if v < q_min {
                        ds += q_min * g[j];
                        dbeta += g[j];
                    } else if v > q_max {
                        ds += q_max * g[j];
                        dbeta += g[j];
                    } else {
                        ds += (v.round() - v) * g[j];
                        if want_x {
                            dx[j] = g[j];
                        }
                    }
                }
                if want_x {
                    let dst = Self::ensure_grad(grads, node.inputs[0], g.len());
                    for (d, v) in dst.iter_mut().zip(&dx) {
                        *d += v;
                    }
                }
                if self.wants_grad(node.inputs[1]) {
                    Self::ensure_grad(grads, node.inputs[1], 1)[0] += ds * gscale;
                }
                if node.inputs.len() == 3 && self.wants_grad(node.inputs[2]) {
                    Self::ensure_grad(grads, node.inputs[2], 1)[0] += dbeta;
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        node: &Node,
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = &self.nodes[node.inputs[0].idx()];
        let w = &self.nodes[node.inputs[1].idx()];
        let n = x.shape[0];
        let cout = w.shape[0];
        let (hw, ckk) = (geom.col_cols(), geom.col_rows());
        let img_len = geom.cin * geom.hin * geom.win;
        let want_x = self.wants_grad(node.inputs[0]);
        let want_w = self.wants_grad(node.inputs[1]);

        let wt = if want_x { Some(kernels::transpose(&w.data, cout, ckk)) } else { None };
        let mut cols = if want_w { vec![0.0; ckk * hw] } else { Vec::new() };
        let mut dcols = if want_x { vec![0.0; ckk * hw] } else { Vec::new() };
        let mut dw_acc = if want_w { vec![0.0; cout * ckk] } else { Vec::new() };
        let mut dx_acc = if want_x { vec![0.0; n * img_len] } else { Vec::new() };

        for i in 0..n {
            let gy = &g[i * cout * hw..(i + 1) * cout * hw];
            if want_w {
                // recompute the unfold instead of caching it; trades flops
                // for a large saved buffer per conv node
                let img = &x.data[i * img_len..(i + 1) * img_len];
                kernels::im2col(img, geom, &mut cols);
                kernels::mm_nt_acc(gy, &cols, &mut dw_acc, cout, hw, ckk);
            }
            if want_x {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                kernels::mm_nn_acc(wt.as_ref().expect("want_x"), gy, &mut dcols, ckk, cout, hw);
                kernels::col2im_acc(&dcols, geom, &mut dx_acc[i * img_len..(i + 1) * img_len]);
            }
        }
        if want_w {
            let dst = Self::ensure_grad(grads, node.inputs[1], w.data.len());
            for (d, v) in dst.iter_mut().zip(&dw_acc) {
                *d += v;
            }
        }
        if want_x {
            let dst = Self::ensure_grad(grads, node.inputs[0], x.data.len());
            for (d, v) in dst.iter_mut().zip(&dx_acc) {
                *d += v;
            }
        }
        if node.inputs.len() == 3 && self.wants_grad(node.inputs[2]) {
            let dst = Self::ensure_grad(grads, node.inputs[2], cout);
            for i in 0..n {
                for c in 0..cout {
                    let row = &g[(i * cout + c) * hw..(i * cout + c + 1) * hw];
                    let mut s = 0.0;
                    for &v in row {
                        s += v;
                    }
                    dst[c] += s;
                }
            }
        }
    }

    fn bn_train_backward(
        &self,
        node: &Node,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = &self.nodes[node.inputs[0].idx()];
        let gamma = &self.nodes[node.inputs[1].idx()];
        let shape = &x.shape;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let count = (n * h * w) as f64;
        let want_x = self.wants_grad(node.inputs[0]);
        let want_g = self.wants_grad(node.inputs[1]);
        let want_b = self.wants_grad(node.inputs[2]);

        // per-channel sums of dy and dy*xhat drive all three gradients
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for j in 0..h * w {
                    let gy = g[base + j];
                    s0 += gy;
                    s1 += gy * (x.data[base + j] - mean[ch]) * inv;
                }
                sum_dy[ch] += s0;
                sum_dy_xhat[ch] += s1;
            }
        }
        if want_b {
            let dst = Self::ensure_grad(grads, node.inputs[2], c);
            for ch in 0..c {
                dst[ch] += sum_dy[ch];
            }
        }
        if want_g {
            let dst = Self::ensure_grad(grads, node.inputs[1], c);
            for ch in 0..c {
                dst[ch] += sum_dy_xhat[ch];
            }
        }
        if want_x {
            let dst = Self::ensure_grad(grads, node.inputs[0], x.data.len());
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * h * w;
                    let inv = 1.0 / (var[ch] + eps).sqrt();
                    let k = gamma.data[ch] * inv;
                    let m_dy = sum_dy[ch] / count;
                    let m_dyx = sum_dy_xhat[ch] / count;
                    for j in 0..h * w {
                        let xhat = (x.data[base + j] - mean[ch]) * inv;
                        dst[base + j] += k * (g[base + j] - m_dy - xhat * m_dyx);
                    }
                }
            }
        }
    }

    fn bn_eval_backward(
        &self,
        node: &Node,
        eps: f64,
        mean: &[f64],
        var: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = &self.nodes[node.inputs[0].idx()];
        let gamma = &self.nodes[node.inputs[1].idx()];
        let shape = &x.shape;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let want_x = self.wants_grad(node.inputs[0]);
        let want_g = self.wants_grad(node.inputs[1]);
        let want_b = self.wants_grad(node.inputs[2]);
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let inv = 1.0 / (var[ch] + eps).sqrt();
                if want_x {
                    let k = gamma.data[ch] * inv;
                    let dst = Self::ensure_grad(grads, node.inputs[0], x.data.len());
                    for j in 0..h * w {
                        dst[base + j] += g[base + j] * k;
                    }
                }
                if want_g {
                    let mut s = 0.0;
                    for j in 0..h * w {
                        s += g[base + j] * (x.data[base + j] - mean[ch]) * inv;
                    }
                    Self::ensure_grad(grads, node.inputs[1], c)[ch] += s;
                }
                if want_b {
                    let mut s = 0.0;
                    for j in 0..h * w {
                        s += g[base + j];
                    }
                    Self::ensure_grad(grads, node.inputs[2], c)[ch] += s;
                }
            }
        }
    }
}

/// (outer, extent, inner) strides for iterating one axis of a shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

/// Integer range of a signed b-bit code.
pub fn quant_range(bits: u32) -> (f64, f64) {
    let q_max = ((1u64 << (bits - 1)) - 1) as f64;
    let q_min = -((1u64 << (bits - 1)) as f64);
    (q_min, q_max)
}

fn channel_moments(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let mut s = 0.0;
            for j in 0..h * w {
                s += x[base + j];
            }
            mean[ch] += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let mut s = 0.0;
            for j in 0..h * w {
                let d = x[base + j] - mean[ch];
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    (mean, var)
}

fn bn_normalize(
    x: &[f64],
    shape: &[usize],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let scale = gamma[ch] * inv;
            let shift = beta[ch] - mean[ch] * scale;
            for j in 0..h * w {
                out[base + j] = x[base + j] * scale + shift;
            }
        }
    }
    out
}
