//! Dense 4-D `f32` storage in (batch, channel, row, column) order.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Checks the extents are nonzero and the element count is addressable.
    pub fn validate(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Shape(alloc::format!("zero extent in {self}")));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .filter(|&v| v <= isize::MAX as usize / core::mem::size_of::<f32>())
            .ok_or(Error::Alloc(*self))
    }

    /// Element count. Only meaningful on a validated shape.
    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Allocates a tensor with every element set to `fill`.
    pub fn alloc(shape: Shape, fill: f32) -> Result<Tensor> {
        let len = shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![fill; len],
        })
    }

    /// Zero tensor; panics on an invalid shape. For internal use where the
    /// shape has already been derived from valid inputs.
    pub(crate) fn zeros(shape: Shape) -> Tensor {
        Tensor::alloc(shape, 0.0).expect("derived shape is valid")
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        let len = shape.validate()?;
        if data.len() != len {
            return Err(Error::Shape(alloc::format!(
                "buffer of {} elements does not fit {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Tensor> {
        let mut t = Tensor::alloc(shape, 0.0)?;
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        t.data[i] = f(n, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h*w` plane of one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Same data, new shape with an identical element count.
    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(alloc::format!(
                "expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Copies channels `[start, start+len)` into a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::Shape(alloc::format!(
                "channel slice [{start}, {}) out of range for {s}",
                start + len
            )));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            shape: s.with_c(len),
            data,
        })
    }

    /// Copies batch item `i` into a batch-of-one tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let s = self.shape;
        if i >= s.n {
            return Err(Error::Shape(alloc::format!("batch index {i} out of range for {s}")));
        }
        let len = s.c * s.plane();
        Ok(Tensor {
            shape: Shape { n: 1, ..s },
            data: self.data[i * len..(i + 1) * len].to_vec(),
        })
    }

    /// Stacks batch-of-one (or larger) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let base = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (base.c, base.h, base.w) {
                return Err(Error::Shape(alloc::format!("cannot stack {s} with {base}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape { n, ..base }, data)
    }
}

/// Channel concatenation: `a`'s channels first, then `b`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape, b.shape);
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::Shape(alloc::format!("cannot concat {sa} with {sb}")));
    }
    let p = sa.plane();
    let out_shape = sa.with_c(sa.c + sb.c);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data[n * sa.c * p..(n + 1) * sa.c * p]);
        data.extend_from_slice(&b.data[n * sb.c * p..(n + 1) * sb.c * p]);
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Zero padding on the spatial axes.
pub fn pad_zero(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let s = x.shape;
    let out_shape = s.with_hw(s.h + top + bottom, s.w + left + right);
    let mut out = Tensor::alloc(out_shape, 0.0)?;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for h in 0..s.h {
                let d = (h + top) * out_shape.w + left;
                dst[d..d + s.w].copy_from_slice(&src[h * s.w..(h + 1) * s.w]);
            }
        }
    }
    Ok(out)
}

/// Single-channel tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte(Tensor);

impl AlphaMatte {
    pub fn new(t: Tensor) -> Result<AlphaMatte> {
        if t.shape().c != 1 {
            return Err(Error::Shape(alloc::format!(
                "alpha matte must have one channel, got {}",
                t.shape()
            )));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(alloc::format!("alpha value {v} outside [0, 1]")));
        }
        Ok(AlphaMatte(t))
    }

    /// Clamps into `[0, 1]` instead of rejecting out-of-range values.
    pub fn clamped(t: Tensor) -> Result<AlphaMatte> {
        AlphaMatte::new(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alloc_fills() {
        let t = Tensor::alloc(Shape::new(1, 1, 2, 2), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::alloc(Shape::new(1, 3, 256, 256), 1.0).unwrap();
        assert_eq!(t.len(), 196_608);
        assert!(t.data().iter().all(|&v| v == 1.0));
        let t = Tensor::alloc(Shape::new(2, 2, 1, 1), 0.5).unwrap();
        assert_eq!(t.data(), &[0.5; 4]);
    }

    #[test]
    fn alloc_rejects_bad_shapes() {
        assert!(matches!(Tensor::alloc(Shape::new(0, 1, 1, 1), 0.0), Err(Error::Shape(_))));
        let huge = Shape::new(usize::MAX / 2, 4, 1, 1);
        assert!(matches!(Tensor::alloc(huge, 0.0), Err(Error::Alloc(_))));
    }

    #[test]
    fn concat_orders_channels() {
        let a = Tensor::alloc(Shape::new(1, 16, 64, 64), 1.0).unwrap();
        let b = Tensor::alloc(Shape::new(1, 16, 64, 64), 2.0).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 32, 64, 64));
        for ch in 0..32 {
            let want = if ch < 16 { 1.0 } else { 2.0 };
            assert!(c.plane(0, ch).iter().all(|&v| v == want));
        }
        let up = Tensor::alloc(Shape::new(1, 64, 32, 32), 0.0).unwrap();
        let refined = Tensor::alloc(Shape::new(1, 64, 32, 32), 0.0).unwrap();
        assert_eq!(concat_channels(&up, &refined).unwrap().shape(), Shape::new(1, 128, 32, 32));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::alloc(Shape::new(1, 2, 4, 4), 0.0).unwrap();
        let b = Tensor::alloc(Shape::new(1, 2, 4, 5), 0.0).unwrap();
        assert!(matches!(concat_channels(&a, &b), Err(Error::Shape(_))));
        let b = Tensor::alloc(Shape::new(2, 2, 4, 4), 0.0).unwrap();
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn pad_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), alloc::vec![5.0]).unwrap();
        let p = pad_zero(&x, 1, 1, 1, 1).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);

        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pad_zero(&x, 0, 0, 0, 0).unwrap(), x);
        let p = pad_zero(&x, 1, 0, 1, 0).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn alpha_matte_domain() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![0.0, 1.0]).unwrap();
        assert!(AlphaMatte::new(t).is_ok());
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![0.0, 1.5]).unwrap();
        assert!(matches!(AlphaMatte::new(t.clone()), Err(Error::Domain(_))));
        assert_eq!(AlphaMatte::clamped(t).unwrap().tensor().data(), &[0.0, 1.0]);
        let t = Tensor::alloc(Shape::new(1, 2, 1, 1), 0.5).unwrap();
        assert!(matches!(AlphaMatte::new(t), Err(Error::Shape(_))));
    }

    fn shape_strategy() -> impl Strategy<Value = Shape> {
        (1usize..3, 1usize..5, 1usize..6, 1usize..6).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
    }

    proptest! {
        #[test]
        fn concat_then_slice_recovers_inputs(
            sa in shape_strategy(),
            cb in 1usize..4,
            seed in any::<u32>(),
        ) {
            let a = Tensor::from_fn(sa, |n, c, h, w| (seed as f32).sin() + (n * 1000 + c * 100 + h * 10 + w) as f32).unwrap();
            let b = Tensor::from_fn(sa.with_c(cb), |n, c, h, w| -((n * 1000 + c * 100 + h * 10 + w) as f32) * 0.37).unwrap();
            let cat = concat_channels(&a, &b).unwrap();
            prop_assert_eq!(cat.slice_channels(0, sa.c).unwrap(), a);
            prop_assert_eq!(cat.slice_channels(sa.c, cb).unwrap(), b);
        }

        #[test]
        fn index_round_trip(s in shape_strategy(), probes in proptest::collection::vec((any::<u16>(), any::<u16>(), any::<u16>(), any::<u16>(), -1e3f32..1e3), 1..20)) {
            let mut t = Tensor::alloc(s, 0.0).unwrap();
            let mut written = alloc::vec::Vec::new();
            for (n, c, h, w, v) in probes {
                let idx = (n as usize % s.n, c as usize % s.c, h as usize % s.h, w as usize % s.w);
                t.set(idx.0, idx.1, idx.2, idx.3, v);
                written.retain(|(i, _)| *i != idx);
                written.push((idx, v));
            }
            for ((n, c, h, w), v) in written {
                prop_assert_eq!(t.get(n, c, h, w), v);
            }
        }

        #[test]
        fn pad_never_produces_nan(s in shape_strategy(), t in 0usize..3, b in 0usize..3, l in 0usize..3, r in 0usize..3) {
            let x = Tensor::alloc(s, 1.25).unwrap();
            let p = pad_zero(&x, t, b, l, r).unwrap();
            prop_assert!(p.all_finite());
            prop_assert_eq!(p.shape(), s.with_hw(s.h + t + b, s.w + l + r));
            prop_assert_eq!(p.sum(), x.sum());
        }
    }
}
