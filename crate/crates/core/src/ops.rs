//! Forward operators: convolution, batch norm, ReLU6, bilinear resize,
//! two-channel softmax and the fixed gradient filters used by the losses
//! and metrics.
//!
//! Convolutions are cross-correlations with TensorFlow-style "same" zero
//! padding: the output has `ceil(in / stride)` rows and columns and any odd
//! padding goes to the bottom/right edge. [`naive_conv2d`] is the literal
//! nested-loop definition and serves as the test oracle for [`conv2d`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{AlphaMatte, Shape, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn standard(kernel: usize, stride: usize, dilation: usize) -> ConvSpec {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            groups: 1,
        }
    }

    pub const fn pointwise() -> ConvSpec {
        ConvSpec::standard(1, 1, 1)
    }

    pub const fn depthwise(kernel: usize, stride: usize, dilation: usize, channels: usize) -> ConvSpec {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            groups: channels,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    /// Output extent along one axis.
    pub fn out_len(&self, in_len: usize) -> usize {
        in_len.div_ceil(self.stride)
    }

    /// Leading and trailing zero padding along one axis.
    pub fn pads(&self, in_len: usize, kernel: usize) -> (usize, usize) {
        let span = self.dilation * (kernel - 1) + 1;
        let total = ((self.out_len(in_len) - 1) * self.stride + span).saturating_sub(in_len);
        (total / 2, total - total / 2)
    }

    pub fn out_shape(&self, x: Shape, out_channels: usize) -> Shape {
        Shape::new(x.n, out_channels, self.out_len(x.h), self.out_len(x.w))
    }

    /// Weight tensor shape `(c_out, c_in / groups, kh, kw)`.
    pub fn weight_shape(&self, in_channels: usize, out_channels: usize) -> Shape {
        Shape::new(out_channels, in_channels / self.groups, self.kernel_h, self.kernel_w)
    }

    /// Checks the spec and the weight tensor against an input shape; returns
    /// the output channel count.
    pub fn check(&self, x: Shape, w: Shape, bias: Option<&[f32]>) -> Result<usize> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if !matches!(self.dilation, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!("dilation {} not in {{1, 2, 4, 8}}", self.dilation)));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config("empty kernel".into()));
        }
        if self.groups != 1 && self.groups != x.c {
            return Err(Error::Shape(format!(
                "groups {} must be 1 or the input channel count {}",
                self.groups, x.c
            )));
        }
        let c_out = w.n;
        if w.c * self.groups != x.c || w.h != self.kernel_h || w.w != self.kernel_w || c_out % self.groups != 0 {
            return Err(Error::Shape(format!(
                "weights {w} do not fit input {x} with {} groups and {}x{} kernel",
                self.groups, self.kernel_h, self.kernel_w
            )));
        }
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::Shape(format!("bias of {} for {c_out} output channels", b.len())));
            }
        }
        Ok(c_out)
    }
}

/// Per-axis sampling geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Geometry {
    pub fn new(spec: &ConvSpec, x: Shape) -> Geometry {
        Geometry {
            in_h: x.h,
            in_w: x.w,
            out_h: spec.out_len(x.h),
            out_w: spec.out_len(x.w),
            stride: spec.stride,
            dilation: spec.dilation,
            pad_top: spec.pads(x.h, spec.kernel_h).0,
            pad_left: spec.pads(x.w, spec.kernel_w).0,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
        }
    }

    /// Output positions `o` in `[lo, hi)` with `0 <= o*stride + offset < in_len`.
    #[inline]
    fn valid(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let last = in_len as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    /// Visits every kernel tap with the range of output rows and columns it
    /// touches and the input offsets for that tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, (usize, usize), isize, (usize, usize), isize)) {
        for ky in 0..self.kh {
            let oy_off = (ky * self.dilation) as isize - self.pad_top as isize;
            let ys = Self::valid(self.out_h, self.in_h, self.stride, oy_off);
            if ys.0 >= ys.1 {
                continue;
            }
            for kx in 0..self.kw {
                let ox_off = (kx * self.dilation) as isize - self.pad_left as isize;
                let xs = Self::valid(self.out_w, self.in_w, self.stride, ox_off);
                if xs.0 >= xs.1 {
                    continue;
                }
                f(ky * self.kw + kx, ys, oy_off, xs, ox_off);
            }
        }
    }

    /// `out += kernel ⋆ inp` for one input plane and one output plane.
    pub fn accumulate<A, T>(&self, out: &mut [A], inp: &[T], kernel: &[T])
    where
        T: Copy + Into<A>,
        A: Copy + core::ops::Mul<Output = A> + core::ops::AddAssign,
    {
        self.accumulate_with(out, inp, kernel, |orow, irow, k| {
            let kv: A = k.into();
            for (o, &i) in orow.iter_mut().zip(irow) {
                *o += kv * i.into();
            }
        });
    }

    /// [`Geometry::accumulate`] with a caller-supplied kernel for contiguous
    /// rows, `row(out, inp, k)` computing `out[i] += k * inp[i]`.
    pub fn accumulate_with<A, T>(&self, out: &mut [A], inp: &[T], kernel: &[T], row: impl Fn(&mut [A], &[T], T))
    where
        T: Copy + Into<A>,
        A: Copy + core::ops::Mul<Output = A> + core::ops::AddAssign,
    {
        let s = self.stride;
        self.for_each_tap(|k, (y0, y1), oy_off, (x0, x1), ox_off| {
            for oy in y0..y1 {
                let iy = (oy * s) as isize + oy_off;
                let irow = &inp[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                let orow = &mut out[oy * self.out_w..(oy + 1) * self.out_w];
                if s == 1 {
                    let ix0 = (x0 as isize + ox_off) as usize;
                    row(&mut orow[x0..x1], &irow[ix0..ix0 + (x1 - x0)], kernel[k]);
                } else {
                    let kv: A = kernel[k].into();
                    for ox in x0..x1 {
                        orow[ox] += kv * irow[((ox * s) as isize + ox_off) as usize].into();
                    }
                }
            }
        });
    }

    /// Transpose of [`Geometry::accumulate`] with respect to the input plane.
    pub fn accumulate_input_grad(&self, dinp: &mut [f32], dout: &[f32], kernel: &[f32]) {
        let s = self.stride;
        self.for_each_tap(|k, (y0, y1), oy_off, (x0, x1), ox_off| {
            let kv = kernel[k];
            for oy in y0..y1 {
                let iy = ((oy * s) as isize + oy_off) as usize;
                let drow = &dout[oy * self.out_w..(oy + 1) * self.out_w];
                let irow = &mut dinp[iy * self.in_w..(iy + 1) * self.in_w];
                if s == 1 {
                    let ix0 = (x0 as isize + ox_off) as usize;
                    for (i, &d) in irow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&drow[x0..x1]) {
                        *i += kv * d;
                    }
                } else {
                    for ox in x0..x1 {
                        irow[((ox * s) as isize + ox_off) as usize] += kv * drow[ox];
                    }
                }
            }
        });
    }

    /// Gradient of [`Geometry::accumulate`] with respect to the kernel.
    pub fn accumulate_kernel_grad(&self, dkernel: &mut [f32], dout: &[f32], inp: &[f32]) {
        let s = self.stride;
        self.for_each_tap(|k, (y0, y1), oy_off, (x0, x1), ox_off| {
            let mut acc = 0.0f32;
            for oy in y0..y1 {
                let iy = ((oy * s) as isize + oy_off) as usize;
                let drow = &dout[oy * self.out_w..(oy + 1) * self.out_w];
                let irow = &inp[iy * self.in_w..(iy + 1) * self.in_w];
                if s == 1 {
                    let ix0 = (x0 as isize + ox_off) as usize;
                    acc += drow[x0..x1]
                        .iter()
                        .zip(&irow[ix0..ix0 + (x1 - x0)])
                        .map(|(&d, &i)| d * i)
                        .sum::<f32>();
                } else {
                    for ox in x0..x1 {
                        acc += drow[ox] * irow[((ox * s) as isize + ox_off) as usize];
                    }
                }
            }
            dkernel[k] += acc;
        });
    }
}

/// Channel ranges of group `g`: (first input channel, inputs per group,
/// first output channel, outputs per group).
#[inline]
fn group_ranges(spec: &ConvSpec, c_in: usize, c_out: usize, g: usize) -> (usize, usize, usize, usize) {
    let ig = c_in / spec.groups;
    let og = c_out / spec.groups;
    (g * ig, ig, g * og, og)
}

/// Direct convolution with fast paths for pointwise and per-plane kernels.
pub fn conv2d(x: &Tensor, weights: &Tensor, bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let c_out = spec.check(xs, weights.shape(), bias)?;
    let out_shape = spec.out_shape(xs, c_out);
    let mut out = Tensor::alloc(out_shape, 0.0)?;

    if spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.groups == 1 {
        pointwise_forward(x, weights.data(), bias, &mut out);
        return Ok(out);
    }

    let geom = Geometry::new(spec, xs);
    let ksize = spec.kernel_h * spec.kernel_w;
    let wd = weights.data();
    for n in 0..xs.n {
        for g in 0..spec.groups {
            let (ci0, ig, co0, og) = group_ranges(spec, xs.c, c_out, g);
            for co in co0..co0 + og {
                let plane = out.plane_mut(n, co);
                if let Some(b) = bias {
                    plane.fill(b[co]);
                }
                for ci in 0..ig {
                    let kernel = &wd[(co * ig + ci) * ksize..(co * ig + ci + 1) * ksize];
                    geom.accumulate(plane, x.plane(n, ci0 + ci), kernel);
                }
            }
        }
    }
    Ok(out)
}

const POINTWISE_CHUNK: usize = 512;

fn pointwise_forward(x: &Tensor, w: &[f32], bias: Option<&[f32]>, out: &mut Tensor) {
    let xs = x.shape();
    let c_out = out.shape().c;
    let p = xs.plane();
    let mut acc = [0.0f32; POINTWISE_CHUNK];
    for n in 0..xs.n {
        let xin = &x.data()[n * xs.c * p..(n + 1) * xs.c * p];
        let mut start = 0;
        while start < p {
            let len = POINTWISE_CHUNK.min(p - start);
            for co in 0..c_out {
                let acc = &mut acc[..len];
                acc.fill(bias.map_or(0.0, |b| b[co]));
                for ci in 0..xs.c {
                    let wv = w[co * xs.c + ci];
                    let src = &xin[ci * p + start..ci * p + start + len];
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a += wv * s;
                    }
                }
                out.plane_mut(n, co)[start..start + len].copy_from_slice(acc);
            }
            start += len;
        }
    }
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(dy: &Tensor, weights: &Tensor, spec: &ConvSpec, x_shape: Shape) -> Tensor {
    let c_out = dy.shape().c;
    let mut dx = Tensor::zeros(x_shape);
    let geom = Geometry::new(spec, x_shape);
    let ksize = spec.kernel_h * spec.kernel_w;
    let wd = weights.data();
    for n in 0..x_shape.n {
        for g in 0..spec.groups {
            let (ci0, ig, co0, og) = group_ranges(spec, x_shape.c, c_out, g);
            for co in co0..co0 + og {
                let dplane = dy.plane(n, co);
                for ci in 0..ig {
                    let kernel = &wd[(co * ig + ci) * ksize..(co * ig + ci + 1) * ksize];
                    geom.accumulate_input_grad(dx.plane_mut(n, ci0 + ci), dplane, kernel);
                }
            }
        }
    }
    dx
}

/// Gradients of [`conv2d`] with respect to its weights and bias.
pub fn conv2d_param_grads(dy: &Tensor, x: &Tensor, spec: &ConvSpec, w_shape: Shape) -> (Tensor, Vec<f32>) {
    let xs = x.shape();
    let c_out = dy.shape().c;
    let mut dw = Tensor::zeros(w_shape);
    let mut db = vec![0.0f32; c_out];
    let geom = Geometry::new(spec, xs);
    let ksize = spec.kernel_h * spec.kernel_w;
    for n in 0..xs.n {
        for g in 0..spec.groups {
            let (ci0, ig, co0, og) = group_ranges(spec, xs.c, c_out, g);
            for co in co0..co0 + og {
                let dplane = dy.plane(n, co);
                db[co] += dplane.iter().sum::<f32>();
                for ci in 0..ig {
                    let dk = &mut dw.data_mut()[(co * ig + ci) * ksize..(co * ig + ci + 1) * ksize];
                    geom.accumulate_kernel_grad(dk, dplane, x.plane(n, ci0 + ci));
                }
            }
        }
    }
    (dw, db)
}

/// Literal definition of grouped, strided, dilated convolution. Test oracle.
pub fn naive_conv2d(x: &Tensor, weights: &Tensor, bias: Option<&[f32]>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let c_out = spec.check(xs, weights.shape(), bias)?;
    let out_shape = spec.out_shape(xs, c_out);
    let (pad_top, _) = spec.pads(xs.h, spec.kernel_h);
    let (pad_left, _) = spec.pads(xs.w, spec.kernel_w);
    let ig = xs.c / spec.groups;
    let og = c_out / spec.groups;
    let mut out = Tensor::alloc(out_shape, 0.0)?;
    for n in 0..out_shape.n {
        for co in 0..c_out {
            let g = co / og;
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..ig {
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad_top as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += weights.get(co, ci, ky, kx) * x.get(n, g * ig + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    /// Decay of the running statistics: `running = m*running + (1-m)*batch`.
    pub momentum: f32,
}

pub const BN_EPSILON: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.99;

impl BatchNormParams {
    pub fn identity(channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        let ok = [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .all(|v| v.len() == self.gamma.len());
        if !ok || self.gamma.len() != c {
            return Err(Error::Shape(format!(
                "batch norm parameters for {} channels applied to {c}",
                self.gamma.len()
            )));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("negative running variance".into()));
        }
        Ok(())
    }

    /// Folds into a per-channel affine map `y = scale*x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / libm::sqrtf(v + self.epsilon))
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * stats.unbiased_var[c];
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased variance, used for normalization.
    pub var: Vec<f32>,
    /// Bessel-corrected variance, used for the running estimate.
    pub unbiased_var: Vec<f32>,
}

pub fn batch_stats(x: &Tensor) -> BatchStats {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f32; s.c];
    let mut var = vec![0.0f32; s.c];
    let mut unbiased_var = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (sq / count) as f32;
        unbiased_var[c] = if count > 1.0 { (sq / (count - 1.0)) as f32 } else { 0.0 };
    }
    BatchStats { mean, var, unbiased_var }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel, using the
/// running statistics.
pub fn batch_norm_inference(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    p.check(x.shape().c)?;
    let (scale, shift) = p.affine();
    Ok(channel_affine(x, &scale, &shift))
}

/// Normalizes with the batch's own statistics; returns them for the caller
/// to fold into the running estimate.
pub fn batch_norm_training(x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BatchStats)> {
    p.check(x.shape().c)?;
    let stats = batch_stats(x);
    let mut scale = vec![0.0; p.channels()];
    let mut shift = vec![0.0; p.channels()];
    for c in 0..p.channels() {
        scale[c] = p.gamma[c] / libm::sqrtf(stats.var[c] + p.epsilon);
        shift[c] = p.beta[c] - stats.mean[c] * scale[c];
    }
    Ok((channel_affine(x, &scale, &shift), stats))
}

/// Batch norm forward; in training mode the running statistics are updated.
pub fn batch_norm(x: &Tensor, p: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    if training {
        let (y, stats) = batch_norm_training(x, p)?;
        p.update_running(&stats);
        Ok(y)
    } else {
        batch_norm_inference(x, p)
    }
}

pub(crate) fn channel_affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (a, b) = (scale[c], shift[c]);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = *v * a + b);
        }
    }
    out
}

pub fn relu6(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 6.0))
}

/// Interpolation taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    /// Weight of `i1`; `i0` gets `1 - frac`.
    pub frac: f32,
}

/// Source coordinate of output index `o` when resizing `in_len -> out_len`.
pub fn source_coord(o: usize, in_len: usize, out_len: usize, align_corners: bool) -> f32 {
    if align_corners {
        if out_len == 1 {
            0.0
        } else {
            o as f32 * (in_len - 1) as f32 / (out_len - 1) as f32
        }
    } else {
        (o as f32 + 0.5) * (in_len as f32 / out_len as f32) - 0.5
    }
}

pub fn axis_taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<AxisTap> {
    (0..out_len)
        .map(|o| {
            let src = source_coord(o, in_len, out_len, align_corners).clamp(0.0, (in_len - 1) as f32);
            let i0 = libm::floorf(src) as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            AxisTap {
                i0,
                i1,
                frac: src - i0 as f32,
            }
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h x out_w`. With
/// `align_corners == false` pixel centers sit at half-integer positions.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize, align_corners: bool) -> Result<Tensor> {
    let s = x.shape();
    let mut out = Tensor::alloc(s.with_hw(out_h, out_w), 0.0)?;
    let ty = axis_taps(s.h, out_h, align_corners);
    let tx = axis_taps(s.w, out_w, align_corners);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, y) in ty.iter().enumerate() {
                let r0 = &src[y.i0 * s.w..(y.i0 + 1) * s.w];
                let r1 = &src[y.i1 * s.w..(y.i1 + 1) * s.w];
                for (ox, t) in tx.iter().enumerate() {
                    let top = (1.0 - t.frac) * r0[t.i0] + t.frac * r0[t.i1];
                    let bot = (1.0 - t.frac) * r1[t.i0] + t.frac * r1[t.i1];
                    dst[oy * out_w + ox] = (1.0 - y.frac) * top + y.frac * bot;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`] (the resize is linear in its input).
pub fn bilinear_resize_grad(dy: &Tensor, in_h: usize, in_w: usize, align_corners: bool) -> Tensor {
    let s = dy.shape();
    let mut dx = Tensor::zeros(s.with_hw(in_h, in_w));
    let ty = axis_taps(in_h, s.h, align_corners);
    let tx = axis_taps(in_w, s.w, align_corners);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let d = dx.plane_mut(n, c);
            for (oy, y) in ty.iter().enumerate() {
                for (ox, t) in tx.iter().enumerate() {
                    let v = g[oy * s.w + ox];
                    let top = (1.0 - y.frac) * v;
                    let bot = y.frac * v;
                    d[y.i0 * in_w + t.i0] += (1.0 - t.frac) * top;
                    d[y.i0 * in_w + t.i1] += t.frac * top;
                    d[y.i1 * in_w + t.i0] += (1.0 - t.frac) * bot;
                    d[y.i1 * in_w + t.i1] += t.frac * bot;
                }
            }
        }
    }
    dx
}

/// Foreground probability of a (background, foreground) logit pair.
#[inline]
pub fn softmax2_foreground(bg: f32, fg: f32) -> f32 {
    let m = bg.max(fg);
    let eb = libm::expf(bg - m);
    let ef = libm::expf(fg - m);
    ef / (eb + ef)
}

/// Softmax across exactly two channels: channel 0 background, 1 foreground.
pub fn softmax2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.c != 2 {
        return Err(Error::Shape(format!("softmax2 needs 2 channels, got {s}")));
    }
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        let base = n * 2 * p;
        for i in 0..p {
            let (bg, fg) = (x.data()[base + i], x.data()[base + p + i]);
            let m = bg.max(fg);
            let eb = libm::expf(bg - m);
            let ef = libm::expf(fg - m);
            let sum = eb + ef;
            out.data_mut()[base + i] = eb / sum;
            out.data_mut()[base + p + i] = ef / sum;
        }
    }
    Ok(out)
}

/// Horizontal derivative stencil used by the gradient loss.
pub const SOBEL_X: [f32; 9] = [-0.125, 0.0, 0.125, -0.25, 0.0, 0.25, -0.125, 0.0, 0.125];
/// Transpose of [`SOBEL_X`].
pub const SOBEL_Y: [f32; 9] = [-0.125, -0.25, -0.125, 0.0, 0.0, 0.0, 0.125, 0.25, 0.125];

/// Weights `(2, 1, 3, 3)` producing `[S*A, S^T*A]`.
pub fn sobel_weights() -> Tensor {
    let mut data = Vec::with_capacity(18);
    data.extend_from_slice(&SOBEL_X);
    data.extend_from_slice(&SOBEL_Y);
    Tensor::from_vec(Shape::new(2, 1, 3, 3), data).expect("static shape")
}

/// Two-channel derivative response of a single-channel map.
pub fn sobel_gradients(a: &Tensor) -> Result<Tensor> {
    if a.shape().c != 1 {
        return Err(Error::Shape(format!("sobel needs one channel, got {}", a.shape())));
    }
    conv2d(a, &sobel_weights(), None, &ConvSpec::standard(3, 1, 1))
}

/// Convenience wrapper over [`sobel_gradients`] for mattes.
pub fn matte_gradients(a: &AlphaMatte) -> Result<Tensor> {
    sobel_gradients(a.tensor())
}

/// First-order Gaussian derivative filters along x and y, each of shape
/// `(1, 1, 2r+1, 2r+1)` with `r = ceil(3*sigma)` and unit L2 norm. The
/// x filter is exactly antisymmetric in its column offset, so it sums to 0.
pub fn gaussian_derivative_kernels(sigma: f32) -> Result<(Tensor, Tensor)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma {sigma} must be positive")));
    }
    let r = libm::ceilf(3.0 * sigma) as usize;
    let size = 2 * r + 1;
    let s2 = (sigma as f64) * (sigma as f64);
    let mut kx = vec![0.0f64; size * size];
    for y in 0..size {
        let dy = y as f64 - r as f64;
        for d in 1..=r {
            let dx = d as f64;
            let v = dx / s2 * libm::exp(-(dx * dx + dy * dy) / (2.0 * s2));
            // Positive response to intensity increasing with x.
            kx[y * size + r + d] = v;
            kx[y * size + r - d] = -v;
        }
    }
    let norm = libm::sqrt(kx.iter().map(|v| v * v).sum::<f64>());
    let kx: Vec<f32> = kx.iter().map(|v| (v / norm) as f32).collect();
    let mut ky = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            ky[y * size + x] = kx[x * size + y];
        }
    }
    let shape = Shape::new(1, 1, size, size);
    Ok((Tensor::from_vec(shape, kx)?, Tensor::from_vec(shape, ky)?))
}
