//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs, so inputs always precede their consumers. [`Tape::backward`]
//! walks the nodes once in reverse order.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, Broadcast, ConvGeom, Mat};
use crate::tensor::{numel, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Cell window in the last two axes, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Window {
    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Option<Box<Broadcast>>),
    Sub(Var, Var, Option<Box<Broadcast>>),
    Mul(Var, Var, Option<Box<Broadcast>>),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Exp(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    SmoothL1(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        /// Unfolded input, `rows x (batch * ncol)`; kept when the kernel needs a gradient.
        cols: Vec<f64>,
    },
    AdaptivePool(Var),
    Upsample(Var),
    Cosine {
        a: Var,
        b: Var,
        axis: usize,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Reshape(Var),
    BroadcastTo(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Crop(Var, Window),
    PadReplicate(Var, usize),
    Grl(Var, f64),
    RoiPool {
        input: Var,
        windows: Vec<Window>,
        out: usize,
    },
    ScatterMax {
        input: Var,
        argmax: Vec<u32>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NO_SOURCE: u32 = u32::MAX;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Graph structure is only kept when a gradient can flow through it.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Option<Box<Broadcast>>) -> Op,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (value, bc) = if sa == sb {
            let data = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::from_parts(sa.to_vec(), data), None)
        } else {
            let bc = Broadcast::new(sa, sb).ok_or_else(|| TensorError::shape(name, sa, sb))?;
            let data = bc
                .a_idx
                .iter()
                .zip(&bc.b_idx)
                .map(|(&i, &j)| f(av[i], bv[j]))
                .collect();
            (Tensor::from_parts(bc.out_shape.clone(), data), Some(Box::new(bc)))
        };
        self.push(name, value, make(a, b, bc), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(a).map(libm::log);
        self.push("log", value, Op::Log(a), &[a])
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(log_sigmoid);
        self.push("log_sigmoid", value, Op::LogSigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(libm::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "powf",
                detail: format!("negative base {bad}"),
            });
        }
        let value = self.value(a).map(|x| libm::pow(x, p));
        self.push("powf", value, Op::Powf(a, p), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = softmax_lastdim(self.value(a), false);
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = softmax_lastdim(self.value(a), true);
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Elementwise smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| {
            let ax = libm::fabs(x);
            if ax < 1.0 {
                0.5 * x * x
            } else {
                ax - 0.5
            }
        });
        self.push("smooth_l1", value, Op::SmoothL1(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// 2-D convolution with zero padding. `input` is `C x H x W` or `N x C x H x W`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, h, w) = match xs.as_slice() {
            &[c, h, w] => (None, c, h, w),
            &[n, c, h, w] => (Some(n), c, h, w),
            _ => return Err(TensorError::dim("conv2d", format!("input must be rank 3 or 4, got {xs:?}"))),
        };
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
            return Err(TensorError::shape("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(TensorError::dim("conv2d", "stride must be positive"));
        }
        let (c_out, k) = (ks[0], ks[2]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::shape("conv2d", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let n = batch.unwrap_or(1);
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let wide = n * ncol;
        let mut cols = vec![0.0; rows * wide];
        let x = self.value(input).data();
        let img = c_in * h * w;
        for b in 0..n {
            im2col(&x[b * img..(b + 1) * img], &geom, &mut cols[b * ncol..], wide);
        }
        let mut prod = vec![0.0; c_out * wide];
        gemm_nn(c_out, rows, wide, self.value(kernel).data(), &cols, &mut prod);
        let mut out = if n == 1 { prod } else { unbatch(&prod, n, c_out, ncol) };
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            for (i, plane) in out.chunks_mut(ncol).enumerate() {
                for v in plane {
                    *v += bias[i % c_out];
                }
            }
        }
        if !self.requires_grad(kernel) {
            cols = Vec::new();
        }
        let shape = match batch {
            Some(n) => vec![n, c_out, geom.h_out, geom.w_out],
            None => vec![c_out, geom.h_out, geom.w_out],
        };
        let value = Tensor::from_parts(shape, out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: n,
                cols,
            },
            &inputs,
        )
    }

    /// Adaptive average pooling over the last two axes.
    pub fn adaptive_avg_pool2d(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let (planes, h, w) = plane_dims("adaptive_avg_pool2d", self.shape(a))?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("adaptive_avg_pool2d", "target extents must be positive"));
        }
        let data = kernels::adaptive_pool_forward(self.value(a).data(), planes, h, w, out_h, out_w);
        let value = Tensor::from_parts(with_plane(self.shape(a), out_h, out_w), data);
        self.push("adaptive_avg_pool2d", value, Op::AdaptivePool(a), &[a])
    }

    /// Nearest-neighbour resize of the last two axes.
    pub fn upsample_to(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let (planes, h, w) = plane_dims("upsample_to", self.shape(a))?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::dim("upsample_to", "target extents must be positive"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            for i in 0..out_h {
                let si = kernels::nearest_src(i, h, out_h);
                for j in 0..out_w {
                    out.push(x[p * h * w + si * w + kernels::nearest_src(j, w, out_w)]);
                }
            }
        }
        let value = Tensor::from_parts(with_plane(self.shape(a), out_h, out_w), out);
        self.push("upsample_to", value, Op::Upsample(a), &[a])
    }

    /// Cosine similarity along `axis`; the axis is removed from the result.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(TensorError::shape("cosine_similarity", &sa, self.shape(b)));
        }
        if axis >= sa.len() {
            return Err(TensorError::dim("cosine_similarity", format!("axis {axis} out of range for {sa:?}")));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    dot += x[idx] * y[idx];
                    nx += x[idx] * x[idx];
                    ny += y[idx] * y[idx];
                }
                out.push(dot / (libm::sqrt(nx).max(eps) * libm::sqrt(ny).max(eps)));
            }
        }
        let mut shape = sa.clone();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push("cosine_similarity", value, Op::Cosine { a, b, axis, eps }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::dim("mean_axis", format!("axis {axis} out of range for {sa:?}")));
        }
        let (outer, len, inner) = split_axis(&sa, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = sa;
        shape[axis] = 1;
        let value = Tensor::from_parts(shape, out);
        self.push("mean_axis", value, Op::MeanAxis(a, axis), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        match kernels::broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => return Err(TensorError::shape("broadcast_to", &sa, shape)),
        }
        let idx = kernels::broadcast_offsets(&sa, shape);
        let x = self.value(a).data();
        let value = Tensor::from_parts(shape.to_vec(), idx.iter().map(|&i| x[i]).collect());
        self.push("broadcast_to", value, Op::BroadcastTo(a, idx), &[a])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let same = sp.len() == s0.len() && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(TensorError::shape("concat", &s0, sp));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Copies the window `win` out of the last two axes.
    pub fn crop(&mut self, a: Var, win: Window) -> Result<Var, TensorError> {
        let (planes, h, w) = plane_dims("crop", self.shape(a))?;
        if win.r0 >= win.r1 || win.c0 >= win.c1 || win.r1 > h || win.c1 > w {
            return Err(TensorError::dim("crop", format!("window {win:?} outside {h}x{w}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * win.height() * win.width());
        for p in 0..planes {
            for r in win.r0..win.r1 {
                out.extend_from_slice(&x[p * h * w + r * w + win.c0..p * h * w + r * w + win.c1]);
            }
        }
        let value = Tensor::from_parts(with_plane(self.shape(a), win.height(), win.width()), out);
        self.push("crop", value, Op::Crop(a, win), &[a])
    }

    /// Pads the last two axes by repeating edge values.
    pub fn pad_replicate(&mut self, a: Var, pad: usize) -> Result<Var, TensorError> {
        let (planes, h, w) = plane_dims("pad_replicate", self.shape(a))?;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * hp * wp);
        for p in 0..planes {
            for r in 0..hp {
                let sr = r.saturating_sub(pad).min(h - 1);
                for c in 0..wp {
                    let sc = c.saturating_sub(pad).min(w - 1);
                    out.push(x[p * h * w + sr * w + sc]);
                }
            }
        }
        let value = Tensor::from_parts(with_plane(self.shape(a), hp, wp), out);
        self.push("pad_replicate", value, Op::PadReplicate(a, pad), &[a])
    }

    /// Gradient reversal: identity forward, `-coeff` times the upstream gradient backward.
    pub fn grl(&mut self, a: Var, coeff: f64) -> Result<Var, TensorError> {
        let value = self.value(a).clone();
        self.push("grl", value, Op::Grl(a, coeff), &[a])
    }

    /// Adaptive-average-pools each window of a `C x H x W` map to `C x out x out`,
    /// stacking the results into `K x C x out x out`.
    pub fn roi_pool(&mut self, a: Var, windows: &[Window], out: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let &[c, h, w] = sa.as_slice() else {
            return Err(TensorError::dim("roi_pool", format!("input must be C x H x W, got {sa:?}")));
        };
        if windows.is_empty() || out == 0 {
            return Err(TensorError::dim("roi_pool", "need at least one window and a positive output size"));
        }
        if let Some(win) = windows
            .iter()
            .find(|win| win.r0 >= win.r1 || win.c0 >= win.c1 || win.r1 > h || win.c1 > w)
        {
            return Err(TensorError::dim("roi_pool", format!("window {win:?} outside {h}x{w}")));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(windows.len() * c * out * out);
        for win in windows {
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for i in 0..out {
                    let (r0, r1) = kernels::pool_bin(i, win.height(), out);
                    for j in 0..out {
                        let (c0, c1) = kernels::pool_bin(j, win.width(), out);
                        let mut s = 0.0;
                        for r in win.r0 + r0..win.r0 + r1 {
                            s += plane[r * w + win.c0 + c0..r * w + win.c0 + c1].iter().sum::<f64>();
                        }
                        data.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![windows.len(), c, out, out], data);
        self.push(
            "roi_pool",
            value,
            Op::RoiPool {
                input: a,
                windows: windows.to_vec(),
                out,
            },
            &[a],
        )
    }

    /// Places per-window patches (`K x C x P x Q`) into a `C x H x W` map.
    ///
    /// Each patch is nearest-resized to its window; cells covered by several
    /// windows take the maximum (earliest window wins ties) and uncovered cells
    /// hold `background`.
    pub fn scatter_max(
        &mut self,
        patches: Var,
        windows: &[Window],
        h: usize,
        w: usize,
        background: f64,
    ) -> Result<Var, TensorError> {
        let sp = self.shape(patches).to_vec();
        let &[k, c, ph, pw] = sp.as_slice() else {
            return Err(TensorError::dim("scatter_max", format!("patches must be K x C x P x Q, got {sp:?}")));
        };
        if windows.len() != k {
            return Err(TensorError::dim("scatter_max", format!("{k} patches but {} windows", windows.len())));
        }
        if let Some(win) = windows
            .iter()
            .find(|win| win.r0 >= win.r1 || win.c0 >= win.c1 || win.r1 > h || win.c1 > w)
        {
            return Err(TensorError::dim("scatter_max", format!("window {win:?} outside {h}x{w}")));
        }
        let x = self.value(patches).data();
        let mut out = vec![background; c * h * w];
        let mut argmax = vec![NO_SOURCE; c * h * w];
        for (kk, win) in windows.iter().enumerate() {
            for ch in 0..c {
                for r in win.r0..win.r1 {
                    let pr = ph_index(r - win.r0, win.height(), ph);
                    for col in win.c0..win.c1 {
                        let pc = ph_index(col - win.c0, win.width(), pw);
                        let src = ((kk * c + ch) * ph + pr) * pw + pc;
                        let dst = (ch * h + r) * w + col;
                        if argmax[dst] == NO_SOURCE || x[src] > out[dst] {
                            out[dst] = x[src];
                            argmax[dst] = src as u32;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![c, h, w], out);
        self.push("scatter_max", value, Op::ScatterMax { input: patches, argmax }, &[patches])
    }

    /// Reverse-mode pass from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.apply_rule(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn unary_grad(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, f: impl Fn(f64, usize) -> f64) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let data = g.data().iter().enumerate().map(|(i, &gi)| gi * f(gi, i)).collect();
        self.accumulate(grads, a, Tensor::from_parts(self.shape(a).to_vec(), data));
    }

    fn apply_rule(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.reduce_into(grads, *a, bc.as_deref().map(|bc| &bc.a_idx[..]), g.data(), 1.0);
                self.reduce_into(grads, *b, bc.as_deref().map(|bc| &bc.b_idx[..]), g.data(), 1.0);
            }
            Op::Sub(a, b, bc) => {
                self.reduce_into(grads, *a, bc.as_deref().map(|bc| &bc.a_idx[..]), g.data(), 1.0);
                self.reduce_into(grads, *b, bc.as_deref().map(|bc| &bc.b_idx[..]), g.data(), -1.0);
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let a_idx = bc.as_deref().map(|bc| &bc.a_idx[..]);
                let b_idx = bc.as_deref().map(|bc| &bc.b_idx[..]);
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = match b_idx {
                        Some(idx) => g.data().iter().zip(idx).map(|(gi, &j)| gi * bv[j]).collect(),
                        None => g.data().iter().zip(bv).map(|(gi, y)| gi * y).collect(),
                    };
                    self.reduce_into(grads, *a, a_idx, &ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = match a_idx {
                        Some(idx) => g.data().iter().zip(idx).map(|(gi, &i)| gi * av[i]).collect(),
                        None => g.data().iter().zip(av).map(|(gi, x)| gi * x).collect(),
                    };
                    self.reduce_into(grads, *b, b_idx, &gb, 1.0);
                }
            }
            Op::Scale(a, c) => self.unary_grad(grads, *a, g, |_, _| *c),
            Op::AddScalar(a) => self.unary_grad(grads, *a, g, |_, _| 1.0),
            Op::Grl(a, c) => self.unary_grad(grads, *a, g, |_, _| -*c),
            Op::Reshape(a) => {
                let ga = Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec());
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| if x[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.unary_grad(grads, *a, g, |_, i| y[i] * (1.0 - y[i]));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| 1.0 / x[i]);
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| sigmoid(-x[i]));
            }
            Op::Exp(a) => {
                let y = out.data();
                self.unary_grad(grads, *a, g, |_, i| y[i]);
            }
            Op::Powf(a, p) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| {
                    if *p == 0.0 {
                        0.0
                    } else {
                        p * libm::pow(x[i], p - 1.0)
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 });
            }
            Op::SmoothL1(a) => {
                let x = self.value(*a).data();
                self.unary_grad(grads, *a, g, |_, i| if libm::fabs(x[i]) < 1.0 { x[i] } else { x[i].signum() });
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (row, (ys, gs)) in y.chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[row * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (row, (ys, gs)) in y.chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        ga[row * n + j] = gs[j] - libm::exp(ys[j]) * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        Mat::row_major(g.data(), n),
                        Mat::transposed(self.value(*b).data(), n),
                        0.0,
                        &mut ga,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        Mat::transposed(self.value(*a).data(), k),
                        Mat::row_major(g.data(), n),
                        0.0,
                        &mut gb,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                cols,
            } => self.conv_backward(grads, g, *input, *kernel, *bias, geom, *batch, cols),
            Op::AdaptivePool(a) => {
                let (planes, h, w) = plane_dims("", self.shape(*a)).expect("checked in forward");
                let s = out.shape();
                let (oh, ow) = (s[s.len() - 2], s[s.len() - 1]);
                let ga = kernels::adaptive_pool_backward(g.data(), planes, h, w, oh, ow);
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
            }
            Op::Upsample(a) => {
                let (planes, h, w) = plane_dims("", self.shape(*a)).expect("checked in forward");
                let s = out.shape();
                let (oh, ow) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        let si = kernels::nearest_src(i, h, oh);
                        for j in 0..ow {
                            ga[p * h * w + si * w + kernels::nearest_src(j, w, ow)] += g.data()[(p * oh + i) * ow + j];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
            }
            Op::Cosine { a, b, axis, eps } => self.cosine_backward(grads, g, *a, *b, *axis, *eps),
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(*a), g.data()[0]);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let ga = Tensor::full(self.shape(*a), g.data()[0] / n);
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAxis(a, axis) => {
                let sa = self.shape(*a);
                let (outer, len, inner) = split_axis(sa, *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g.data()[o * inner + i] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
            }
            Op::BroadcastTo(a, idx) => self.reduce_into(grads, *a, Some(idx), g.data(), 1.0),
            Op::Concat(parts, axis) => {
                let s0 = out.shape();
                let (outer, total, inner) = split_axis(s0, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), gp));
                    }
                    offset += len;
                }
            }
            Op::Crop(a, win) => {
                let (planes, h, w) = plane_dims("", self.shape(*a)).expect("checked in forward");
                let mut ga = vec![0.0; planes * h * w];
                let (ch, cw) = (win.height(), win.width());
                for p in 0..planes {
                    for r in 0..ch {
                        let dst = p * h * w + (win.r0 + r) * w + win.c0;
                        let src = (p * ch + r) * cw;
                        ga[dst..dst + cw].copy_from_slice(&g.data()[src..src + cw]);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
            }
            Op::PadReplicate(a, pad) => {
                let (planes, h, w) = plane_dims("", self.shape(*a)).expect("checked in forward");
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut ga = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for r in 0..hp {
                        let sr = r.saturating_sub(*pad).min(h - 1);
                        for c in 0..wp {
                            let sc = c.saturating_sub(*pad).min(w - 1);
                            ga[p * h * w + sr * w + sc] += g.data()[(p * hp + r) * wp + c];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), ga));
            }
            Op::RoiPool { input, windows, out: o } => {
                let sa = self.shape(*input);
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let mut ga = vec![0.0; c * h * w];
                let gd = g.data();
                let mut idx = 0;
                for win in windows {
                    for ch in 0..c {
                        let plane = &mut ga[ch * h * w..(ch + 1) * h * w];
                        for i in 0..*o {
                            let (r0, r1) = kernels::pool_bin(i, win.height(), *o);
                            for j in 0..*o {
                                let (c0, c1) = kernels::pool_bin(j, win.width(), *o);
                                let v = gd[idx] / ((r1 - r0) * (c1 - c0)) as f64;
                                idx += 1;
                                for r in win.r0 + r0..win.r0 + r1 {
                                    for d in &mut plane[r * w + win.c0 + c0..r * w + win.c0 + c1] {
                                        *d += v;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(sa.to_vec(), ga));
            }
            Op::ScatterMax { input, argmax } => {
                let mut ga = vec![0.0; self.value(*input).len()];
                for (gi, &src) in g.data().iter().zip(argmax) {
                    if src != NO_SOURCE {
                        ga[src as usize] += gi;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(self.shape(*input).to_vec(), ga));
            }
        }
    }

    /// Sums `g` (laid out over the broadcast output) back onto the elements of `v`.
    fn reduce_into(&self, grads: &mut [Option<Tensor>], v: Var, idx: Option<&[usize]>, g: &[f64], sign: f64) {
        if !self.requires_grad(v) {
            return;
        }
        let shape = self.shape(v).to_vec();
        let out = match idx {
            Some(idx) => {
                let mut out = vec![0.0; numel(&shape)];
                for (gi, &i) in g.iter().zip(idx) {
                    out[i] += sign * gi;
                }
                out
            }
            None => g.iter().map(|gi| sign * gi).collect(),
        };
        self.accumulate(grads, v, Tensor::from_parts(shape, out));
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        batch: usize,
        cols: &[f64],
    ) {
        let c_out = self.shape(kernel)[0];
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let wide = batch * ncol;
        let img = geom.c_in * geom.h * geom.w;
        let gy = if batch == 1 { g.data().to_vec() } else { rebatch(g.data(), batch, c_out, ncol) };
        if self.requires_grad(kernel) {
            let mut gk = vec![0.0; c_out * rows];
            kernels::gemm(c_out, wide, rows, 1.0, Mat::row_major(&gy, wide), Mat::transposed(cols, wide), 0.0, &mut gk);
            self.accumulate(grads, kernel, Tensor::from_parts(self.shape(kernel).to_vec(), gk));
        }
        if self.requires_grad(input) {
            let kd = self.value(kernel).data();
            let mut dcols = vec![0.0; rows * wide];
            kernels::gemm(rows, c_out, wide, 1.0, Mat::transposed(kd, rows), Mat::row_major(&gy, wide), 0.0, &mut dcols);
            let mut gx = vec![0.0; batch * img];
            for b in 0..batch {
                col2im(&dcols[b * ncol..], geom, &mut gx[b * img..(b + 1) * img], wide);
            }
            self.accumulate(grads, input, Tensor::from_parts(self.shape(input).to_vec(), gx));
        }
        if let Some(bv) = bias {
            if self.requires_grad(bv) {
                let mut gb = vec![0.0; c_out];
                for b in 0..batch {
                    for (co, plane) in g.data()[b * c_out * ncol..(b + 1) * c_out * ncol].chunks(ncol).enumerate() {
                        gb[co] += plane.iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, bv, Tensor::from_parts(vec![c_out], gb));
            }
        }
    }

    fn cosine_backward(&self, grads: &mut [Option<Tensor>], g: &Tensor, a: Var, b: Var, axis: usize, eps: f64) {
        let sa = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&sa, axis);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut ga = vec![0.0; x.len()];
        let mut gb = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let (mut dot, mut nx2, mut ny2) = (0.0, 0.0, 0.0);
                for l in 0..len {
                    dot += x[at(l)] * y[at(l)];
                    nx2 += x[at(l)] * x[at(l)];
                    ny2 += y[at(l)] * y[at(l)];
                }
                let (nx, ny) = (libm::sqrt(nx2), libm::sqrt(ny2));
                let (dx, dy) = (nx.max(eps), ny.max(eps));
                let gi = g.data()[o * inner + i];
                let cos = dot / (dx * dy);
                // The norm term only contributes where the eps guard is inactive.
                let kx = if nx > eps { cos / (nx * nx) } else { 0.0 };
                let ky = if ny > eps { cos / (ny * ny) } else { 0.0 };
                for l in 0..len {
                    ga[at(l)] += gi * (y[at(l)] / (dx * dy) - kx * x[at(l)]);
                    gb[at(l)] += gi * (x[at(l)] / (dx * dy) - ky * y[at(l)]);
                }
            }
        }
        self.accumulate(grads, a, Tensor::from_parts(sa.clone(), ga));
        self.accumulate(grads, b, Tensor::from_parts(sa, gb));
    }
}

fn ph_index(i: usize, n: usize, p: usize) -> usize {
    kernels::nearest_src(i, p, n).min(p - 1)
}

fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    kernels::gemm(m, k, n, 1.0, Mat::row_major(a, k), Mat::row_major(b, n), 0.0, c);
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    kernels::im2col(x, g, cols, ld)
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize) {
    kernels::col2im(cols, g, dx, ld)
}

/// `c x (n * m)` (images side by side) to `n x c x m` (image-major).
fn unbatch(x: &[f64], n: usize, c: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&x[ch * n * m + b * m..ch * n * m + (b + 1) * m]);
        }
    }
    out
}

/// Inverse of [`unbatch`].
fn rebatch(x: &[f64], n: usize, c: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + ch) * m..(b * c + ch + 1) * m]);
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

fn softmax_lastdim(t: &Tensor, log: bool) -> Tensor {
    let n = *t.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
        if log {
            let lz = libm::log(z) + m;
            out.extend(row.iter().map(|&v| v - lz));
        } else {
            out.extend(row.iter().map(|&v| libm::exp(v - m) / z));
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(TensorError::dim(op, format!("need at least two axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((numel(&shape[..shape.len() - 2]), h, w))
}

fn with_plane(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}
