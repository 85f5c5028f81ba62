//! 8-bit asymmetric quantization: affine parameters, range observers,
//! fixed-point requantization, integer convolution and resize kernels, and
//! the exhaustive two-channel softmax lookup table.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, Geometry};
use crate::tensor::{Shape, Tensor};

/// Width added to a degenerate (empty) observed range.
pub const DEGENERATE_RANGE_EPS: f32 = 1e-6;

/// Affine map between `u8` codes and reals: `real = (q - zero_point) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u8,
    pub min: f32,
    pub max: f32,
}

impl QuantParams {
    /// Parameters covering `[min, max]` extended to include zero, so that
    /// real 0 has an exact code.
    pub fn from_range(min: f32, max: f32) -> QuantParams {
        Self::from_range_checked(min, max).0
    }

    /// Like [`QuantParams::from_range`]; also reports whether the range was
    /// degenerate and had to be widened.
    pub fn from_range_checked(min: f32, max: f32) -> (QuantParams, bool) {
        let mut lo = min.min(0.0);
        let mut hi = max.max(0.0);
        let widened = hi - lo < DEGENERATE_RANGE_EPS;
        if widened {
            lo -= DEGENERATE_RANGE_EPS / 2.0;
            hi += DEGENERATE_RANGE_EPS / 2.0;
        }
        let scale = (hi - lo) / 255.0;
        let zp = libm::roundf(-lo / scale).clamp(0.0, 255.0) as u8;
        (
            QuantParams {
                scale,
                zero_point: zp,
                min: lo,
                max: hi,
            },
            widened,
        )
    }

    /// Range from the exact extremes of a tensor (used for weights).
    pub fn from_tensor(t: &Tensor) -> QuantParams {
        let (lo, hi) = t.min_max();
        QuantParams::from_range(lo, hi)
    }

    /// Fixed output encoding of probabilities: scale 1/256, zero point 0.
    pub fn probability() -> QuantParams {
        QuantParams {
            scale: 1.0 / 256.0,
            zero_point: 0,
            min: 0.0,
            max: 1.0,
        }
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> u8 {
        (libm::roundf(x / self.scale) + self.zero_point as f32).clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f32 {
        (q as i32 - self.zero_point as i32) as f32 * self.scale
    }

    /// Reals representable by codes 0 and 255.
    pub fn representable_range(&self) -> (f32, f32) {
        (self.dequantize(0), self.dequantize(255))
    }

    pub fn fake_quant(&self, x: &Tensor) -> Tensor {
        x.map(|v| self.dequantize(self.quantize(v)))
    }
}

/// Quantized tensor: `u8` codes plus the affine map that decodes them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub shape: Shape,
    pub data: Vec<u8>,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn plane(&self, n: usize, c: usize) -> &[u8] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }
}

pub fn quantize(x: &Tensor, p: QuantParams) -> QuantTensor {
    QuantTensor {
        shape: x.shape(),
        data: x.data().iter().map(|&v| p.quantize(v)).collect(),
        params: p,
    }
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q.data.iter().map(|&v| q.params.dequantize(v)).collect();
    Tensor::from_vec(q.shape, data).expect("quant tensor shape is valid")
}

pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Tensor {
    p.fake_quant(x)
}

/// Exponential moving average of observed min/max.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeObserver {
    pub momentum: f32,
    range: Option<(f32, f32)>,
}

pub const DEFAULT_OBSERVER_MOMENTUM: f32 = 0.99;

impl Default for RangeObserver {
    fn default() -> Self {
        RangeObserver::new(DEFAULT_OBSERVER_MOMENTUM)
    }
}

impl RangeObserver {
    pub fn new(momentum: f32) -> RangeObserver {
        RangeObserver { momentum, range: None }
    }

    /// First batch sets the range; later batches blend in with
    /// `r = m*r + (1-m)*batch`.
    pub fn observe(&mut self, x: &Tensor) {
        let (lo, hi) = x.min_max();
        self.range = Some(match self.range {
            None => (lo, hi),
            Some((a, b)) => {
                let m = self.momentum;
                (m * a + (1.0 - m) * lo, m * b + (1.0 - m) * hi)
            }
        });
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        self.range
    }

    pub fn params(&self) -> Option<QuantParams> {
        self.range.map(|(lo, hi)| QuantParams::from_range(lo, hi))
    }
}

/// Quantization parameters for a stream of activation batches.
pub fn calibrate<'a>(stream: impl IntoIterator<Item = &'a Tensor>, momentum: f32) -> Result<QuantParams> {
    let mut obs = RangeObserver::new(momentum);
    for t in stream {
        obs.observe(t);
    }
    obs.params()
        .ok_or_else(|| Error::Contract("calibration stream is empty".into()))
}

/// Real multiplier `M` as `multiplier * 2^(exponent - 31)` with a Q31
/// mantissa in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedMultiplier {
    pub multiplier: i32,
    pub exponent: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> FixedMultiplier {
        if m <= 0.0 {
            return FixedMultiplier {
                multiplier: 0,
                exponent: 0,
            };
        }
        let (mut mant, mut exp) = libm::frexp(m);
        let mut q = libm::round(mant * (1u64 << 31) as f64) as i64;
        if q == 1i64 << 31 {
            q /= 2;
            exp += 1;
            mant = 0.5;
        }
        let _ = mant;
        FixedMultiplier {
            multiplier: q as i32,
            exponent: exp,
        }
    }

    /// `round(x * M)` with ties away from zero, in integer arithmetic only.
    #[inline]
    pub fn apply(&self, x: i32) -> i32 {
        let prod = x as i64 * self.multiplier as i64;
        let shift = 31 - self.exponent;
        if shift <= 0 {
            return (prod << (-shift)).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
        }
        if shift >= 63 {
            return 0;
        }
        let half = 1i64 << (shift - 1);
        let r = if prod >= 0 { (prod + half) >> shift } else { -((-prod + half) >> shift) };
        r.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }
}

/// Integer bias for an accumulator with scale `in_scale * w_scale`.
pub fn quantize_bias(bias: &[f32], in_scale: f32, w_scale: f32) -> Vec<i32> {
    let s = in_scale as f64 * w_scale as f64;
    bias.iter().map(|&b| libm::round(b as f64 / s) as i32).collect()
}

/// Code range an activation is clamped to after requantization. ReLU6
/// layers clamp to the codes of 0 and 6.
pub fn activation_clamp(out: &QuantParams, relu6: bool) -> (u8, u8) {
    if relu6 {
        (out.quantize(0.0), out.quantize(6.0))
    } else {
        (0, 255)
    }
}

/// Integer convolution: `i32` accumulation of `(x - zx)(w - zw)` plus bias,
/// requantized into `out_p` and clamped to `clamp`.
pub fn qconv2d(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    spec: &ConvSpec,
    out_p: QuantParams,
    clamp: (u8, u8),
) -> Result<QuantTensor> {
    let xs = x.shape;
    let c_out = spec.check(xs, w.shape, None)?;
    if bias.len() != c_out {
        return Err(Error::Shape(format!("bias of {} for {c_out} output channels", bias.len())));
    }
    let out_shape = spec.out_shape(xs, c_out);
    let m = FixedMultiplier::from_real(x.params.scale as f64 * w.params.scale as f64 / out_p.scale as f64);
    let zx = x.params.zero_point as i32;
    let zw = w.params.zero_point as i32;
    let zo = out_p.zero_point as i32;
    // Zero-point-shifted operands fit in i16; products widen to i32.
    let xi: Vec<i16> = x.data.iter().map(|&v| (v as i32 - zx) as i16).collect();
    let wi: Vec<i16> = w.data.iter().map(|&v| (v as i32 - zw) as i16).collect();
    let mut out = vec![0u8; out_shape.len()];
    let op = out_shape.plane();
    let ip = xs.plane();
    let (lo, hi) = (clamp.0 as i32, clamp.1 as i32);

    let pointwise = spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.groups == 1;
    if pointwise {
        // Pixels are processed in chunks with input channels interleaved in
        // pairs, so each step is a pairwise i16 multiply-add into i32.
        const CHUNK: usize = 512;
        let pairs = xs.c.div_ceil(2);
        let wpairs: Vec<(i16, i16)> = (0..c_out)
            .flat_map(|co| {
                let row = &wi[co * xs.c..(co + 1) * xs.c];
                (0..pairs).map(move |p| (row[2 * p], row.get(2 * p + 1).copied().unwrap_or(0)))
            })
            .collect();
        let mut packed = vec![0i16; pairs * CHUNK * 2];
        let mut acc = [0i32; CHUNK];
        for n in 0..xs.n {
            let xin = &xi[n * xs.c * ip..(n + 1) * xs.c * ip];
            let mut start = 0;
            while start < ip {
                let len = CHUNK.min(ip - start);
                for p in 0..pairs {
                    let dst = &mut packed[p * len * 2..(p + 1) * len * 2];
                    let a = &xin[2 * p * ip + start..2 * p * ip + start + len];
                    if 2 * p + 1 < xs.c {
                        let b = &xin[(2 * p + 1) * ip + start..(2 * p + 1) * ip + start + len];
                        for ((d, &u), &v) in dst.chunks_exact_mut(2).zip(a).zip(b) {
                            d[0] = u;
                            d[1] = v;
                        }
                    } else {
                        for (d, &u) in dst.chunks_exact_mut(2).zip(a) {
                            d[0] = u;
                            d[1] = 0;
                        }
                    }
                }
                for co in 0..c_out {
                    let acc = &mut acc[..len];
                    acc.fill(bias[co]);
                    for (p, &(k0, k1)) in wpairs[co * pairs..(co + 1) * pairs].iter().enumerate() {
                        madd_pairs(acc, &packed[p * len * 2..(p + 1) * len * 2], k0, k1);
                    }
                    let dst = &mut out[(n * c_out + co) * op + start..(n * c_out + co) * op + start + len];
                    for (d, &a) in dst.iter_mut().zip(acc.iter()) {
                        *d = (zo + m.apply(a)).clamp(lo, hi) as u8;
                    }
                }
                start += len;
            }
        }
    } else {
        let mut acc = vec![0i32; op];
        let geom = Geometry::new(spec, xs);
        let ksize = spec.kernel_h * spec.kernel_w;
        let ig = xs.c / spec.groups;
        let og = c_out / spec.groups;
        for n in 0..xs.n {
            for co in 0..c_out {
                acc.fill(bias[co]);
                let g = co / og;
                for ci in 0..ig {
                    let cin = g * ig + ci;
                    let src = &xi[(n * xs.c + cin) * ip..(n * xs.c + cin + 1) * ip];
                    let kernel = &wi[(co * ig + ci) * ksize..(co * ig + ci + 1) * ksize];
                    geom.accumulate_with(&mut acc, src, kernel, mac_row);
                }
                let dst = &mut out[(n * c_out + co) * op..(n * c_out + co + 1) * op];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = (zo + m.apply(a)).clamp(lo, hi) as u8;
                }
            }
        }
    }
    Ok(QuantTensor {
        shape: out_shape,
        data: out,
        params: out_p,
    })
}

/// `acc[i] += k0 * src[2i] + k1 * src[2i + 1]`, widened to `i32`.
fn madd_pairs(acc: &mut [i32], src: &[i16], k0: i16, k1: i16) {
    debug_assert_eq!(src.len(), 2 * acc.len());
    let mut done = 0;
    #[cfg(target_arch = "x86_64")]
    {
        use core::arch::x86_64::{__m128i, _mm_add_epi32, _mm_loadu_si128, _mm_madd_epi16, _mm_set1_epi32, _mm_storeu_si128};
        let k = ((k1 as u16 as u32) << 16 | k0 as u16 as u32) as i32;
        done = acc.len() / 4 * 4;
        // SAFETY: SSE2 is part of the x86_64 baseline. Every access covers
        // acc[i..i + 4] and src[2i..2i + 8] with i + 4 <= done <= acc.len(),
        // and the unaligned load/store intrinsics impose no alignment.
        unsafe {
            let kk = _mm_set1_epi32(k);
            for i in (0..done).step_by(4) {
                let a = acc.as_mut_ptr().add(i) as *mut __m128i;
                let v = _mm_loadu_si128(src.as_ptr().add(2 * i) as *const __m128i);
                _mm_storeu_si128(a, _mm_add_epi32(_mm_loadu_si128(a), _mm_madd_epi16(v, kk)));
            }
        }
    }
    for (a, s) in acc[done..].iter_mut().zip(src[2 * done..].chunks_exact(2)) {
        *a += k0 as i32 * s[0] as i32 + k1 as i32 * s[1] as i32;
    }
}

/// `acc[i] += k * src[i]`, widened to `i32`.
fn mac_row(acc: &mut [i32], src: &[i16], k: i16) {
    debug_assert_eq!(src.len(), acc.len());
    let mut done = 0;
    #[cfg(target_arch = "x86_64")]
    {
        use core::arch::x86_64::{
            __m128i, _mm_add_epi32, _mm_loadu_si128, _mm_mulhi_epi16, _mm_mullo_epi16, _mm_set1_epi16, _mm_storeu_si128,
            _mm_unpackhi_epi16, _mm_unpacklo_epi16,
        };
        done = acc.len() / 8 * 8;
        // SAFETY: SSE2 is part of the x86_64 baseline. Every access covers
        // acc[i..i + 8] and src[i..i + 8] with i + 8 <= done <= acc.len(),
        // and the unaligned load/store intrinsics impose no alignment.
        unsafe {
            let kk = _mm_set1_epi16(k);
            for i in (0..done).step_by(8) {
                let v = _mm_loadu_si128(src.as_ptr().add(i) as *const __m128i);
                let (lo, hi) = (_mm_mullo_epi16(v, kk), _mm_mulhi_epi16(v, kk));
                let a0 = acc.as_mut_ptr().add(i) as *mut __m128i;
                let a1 = acc.as_mut_ptr().add(i + 4) as *mut __m128i;
                _mm_storeu_si128(a0, _mm_add_epi32(_mm_loadu_si128(a0), _mm_unpacklo_epi16(lo, hi)));
                _mm_storeu_si128(a1, _mm_add_epi32(_mm_loadu_si128(a1), _mm_unpackhi_epi16(lo, hi)));
            }
        }
    }
    for (a, &s) in acc[done..].iter_mut().zip(&src[done..]) {
        *a += k as i32 * s as i32;
    }
}

/// Depthwise integer convolution; see [`qconv2d`].
pub fn qconv_depthwise(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    spec: &ConvSpec,
    out_p: QuantParams,
    clamp: (u8, u8),
) -> Result<QuantTensor> {
    if spec.groups != x.shape.c || w.shape.n != x.shape.c {
        return Err(Error::Shape(format!("depthwise conv needs groups == channels, got {spec:?} on {}", x.shape)));
    }
    qconv2d(x, w, bias, spec, out_p, clamp)
}

/// 1x1 integer convolution; see [`qconv2d`].
pub fn qconv_pointwise(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: &[i32],
    out_p: QuantParams,
    clamp: (u8, u8),
) -> Result<QuantTensor> {
    qconv2d(x, w, bias, &ConvSpec::pointwise(), out_p, clamp)
}

/// Maps codes from `x.params` to `out_p`.
pub fn requantize(x: &QuantTensor, out_p: QuantParams) -> QuantTensor {
    if x.params == out_p {
        return x.clone();
    }
    let m = FixedMultiplier::from_real(x.params.scale as f64 / out_p.scale as f64);
    let (zi, zo) = (x.params.zero_point as i32, out_p.zero_point as i32);
    QuantTensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .map(|&q| (zo + m.apply(q as i32 - zi)).clamp(0, 255) as u8)
            .collect(),
        params: out_p,
    }
}

/// Channel concatenation into a shared output encoding.
pub fn qconcat(a: &QuantTensor, b: &QuantTensor, out_p: QuantParams) -> Result<QuantTensor> {
    let (sa, sb) = (a.shape, b.shape);
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::Shape(format!("cannot concat {sa} with {sb}")));
    }
    let (ra, rb) = (requantize(a, out_p), requantize(b, out_p));
    let p = sa.plane();
    let mut data = Vec::with_capacity((sa.c + sb.c) * p * sa.n);
    for n in 0..sa.n {
        data.extend_from_slice(&ra.data[n * sa.c * p..(n + 1) * sa.c * p]);
        data.extend_from_slice(&rb.data[n * sb.c * p..(n + 1) * sb.c * p]);
    }
    Ok(QuantTensor {
        shape: sa.with_c(sa.c + sb.c),
        data,
        params: out_p,
    })
}

/// Fractional weights in units of 1/256.
const RESIZE_ONE: u16 = 256;

/// Bilinear resize on codes (half-pixel centers). Horizontal passes produce
/// `u16` intermediates, the vertical pass rounds back to `u8`. The encoding
/// is unchanged.
pub fn qresize_bilinear(x: &QuantTensor, out_h: usize, out_w: usize) -> QuantTensor {
    let s = x.shape;
    let ty = ops::axis_taps(s.h, out_h, false);
    let tx = ops::axis_taps(s.w, out_w, false);
    let fx: Vec<u16> = tx.iter().map(|t| libm::roundf(t.frac * RESIZE_ONE as f32) as u16).collect();
    let fy: Vec<u16> = ty.iter().map(|t| libm::roundf(t.frac * RESIZE_ONE as f32) as u16).collect();
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = vec![0u8; out_shape.len()];
    let mut row0 = vec![0u16; out_w];
    let mut row1 = vec![0u16; out_w];
    let interp_row = |src: &[u8], dst: &mut [u16]| {
        for (ox, t) in tx.iter().enumerate() {
            let w1 = fx[ox];
            dst[ox] = src[t.i0] as u16 * (RESIZE_ONE - w1) + src[t.i1] as u16 * w1;
        }
    };
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let base = (n * s.c + c) * out_shape.plane();
            for (oy, t) in ty.iter().enumerate() {
                interp_row(&src[t.i0 * s.w..(t.i0 + 1) * s.w], &mut row0);
                interp_row(&src[t.i1 * s.w..(t.i1 + 1) * s.w], &mut row1);
                let w1 = fy[oy] as u32;
                let w0 = RESIZE_ONE as u32 - w1;
                for ox in 0..out_w {
                    let v = row0[ox] as u32 * w0 + row1[ox] as u32 * w1;
                    out[base + oy * out_w + ox] = ((v + (1 << 15)) >> 16) as u8;
                }
            }
        }
    }
    QuantTensor {
        shape: out_shape,
        data: out,
        params: x.params,
    }
}

/// Foreground probability for every pair of quantized (background,
/// foreground) logits, encoded with [`QuantParams::probability`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxLut {
    pub logit_params: QuantParams,
    table: Vec<u8>,
}

impl SoftmaxLut {
    pub const ENTRIES: usize = 65_536;

    pub fn build(logit_params: QuantParams) -> SoftmaxLut {
        let deq: Vec<f32> = (0..=255u8).map(|q| logit_params.dequantize(q)).collect();
        let out = QuantParams::probability();
        let mut table = vec![0u8; Self::ENTRIES];
        for q0 in 0..256 {
            for q1 in 0..256 {
                table[q0 * 256 + q1] = out.quantize(ops::softmax2_foreground(deq[q0], deq[q1]));
            }
        }
        SoftmaxLut { logit_params, table }
    }

    pub fn from_table(logit_params: QuantParams, table: Vec<u8>) -> Result<SoftmaxLut> {
        if table.len() != Self::ENTRIES {
            return Err(Error::Shape(format!("softmax table has {} entries", table.len())));
        }
        Ok(SoftmaxLut { logit_params, table })
    }

    #[inline]
    pub fn lookup(&self, bg: u8, fg: u8) -> u8 {
        self.table[bg as usize * 256 + fg as usize]
    }

    pub fn table(&self) -> &[u8] {
        &self.table
    }

    /// Applies the table per pixel to two-channel logits; returns the
    /// one-channel foreground probability.
    pub fn apply(&self, logits: &QuantTensor) -> Result<QuantTensor> {
        let s = logits.shape;
        if s.c != 2 {
            return Err(Error::Shape(format!("softmax table needs 2 channels, got {s}")));
        }
        let logits = requantize(logits, self.logit_params);
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * p);
        for n in 0..s.n {
            let (bg, fg) = (logits.plane(n, 0), logits.plane(n, 1));
            data.extend(bg.iter().zip(fg).map(|(&b, &f)| self.lookup(b, f)));
        }
        Ok(QuantTensor {
            shape: s.with_c(1),
            data,
            params: QuantParams::probability(),
        })
    }
}

pub fn build_softmax_lut(logit_params: QuantParams) -> SoftmaxLut {
    SoftmaxLut::build(logit_params)
}
