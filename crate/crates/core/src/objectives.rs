//! Training losses and evaluation metrics for alpha mattes.
//!
//! Each loss has a plain form over tensors and a tape form used for
//! training. Both average over every element, batch included.

use alloc::format;
use alloc::vec::Vec;

use crate::arch;
use crate::autodiff::{bce_value, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{AlphaMatte, Tensor};

/// Probability clamp for the cross-entropy terms.
pub const KL_EPSILON: f32 = 1e-6;
/// Standard deviation of the Gaussian derivative filters in the gradient
/// error metric.
pub const METRIC_SIGMA: f32 = 1.4;

/// Multipliers of the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
    pub compositional: f32,
    pub kl: f32,
    pub gradient: f32,
    pub aux: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            compositional: 1.0,
            kl: 1.0,
            gradient: 1.0,
            aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> LossWeights {
        LossWeights {
            alpha: 0.0,
            compositional: 0.0,
            kl: 0.0,
            gradient: 0.0,
            aux: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.compositional, self.kl, self.gradient, self.aux];
        if all.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Value of every term and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub alpha: f64,
    pub compositional: f64,
    pub kl: f64,
    pub gradient: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("alpha", self.alpha),
            ("compositional", self.compositional),
            ("kl", self.kl),
            ("gradient", self.gradient),
            ("aux", self.aux),
            ("total", self.total),
        ]
    }

    fn weighted(mut self, w: &LossWeights) -> LossBreakdown {
        self.total = w.alpha as f64 * self.alpha
            + w.compositional as f64 * self.compositional
            + w.kl as f64 * self.kl
            + w.gradient as f64 * self.gradient
            + w.aux as f64 * self.aux;
        self
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Mean absolute alpha difference.
pub fn loss_alpha(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    mean_abs_diff(pred.tensor(), gt.tensor())
}

/// Mean absolute difference of the alpha-weighted image, over all three
/// channels.
pub fn loss_compositional(pred: &AlphaMatte, gt: &AlphaMatte, image: &Tensor) -> Result<f64> {
    let (p, g) = (pred.tensor(), gt.tensor());
    same_shape(p, g)?;
    let (ps, is) = (p.shape(), image.shape());
    if (ps.n, ps.h, ps.w) != (is.n, is.h, is.w) || is.c != 3 {
        return Err(Error::Shape(format!("image {is} does not match matte {ps}")));
    }
    let mut sum = 0.0f64;
    for n in 0..ps.n {
        let d: Vec<f64> = p.plane(n, 0).iter().zip(g.plane(n, 0)).map(|(&a, &b)| a as f64 - b as f64).collect();
        for c in 0..3 {
            sum += image.plane(n, c).iter().zip(&d).map(|(&i, &d)| (d * i as f64).abs()).sum::<f64>();
        }
    }
    Ok(sum / image.len() as f64)
}

/// Mean binary cross-entropy of the prediction against the ground truth.
pub fn loss_kl(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    same_shape(pred.tensor(), gt.tensor())?;
    Ok(bce_value(pred.tensor(), gt.tensor(), KL_EPSILON))
}

/// Mean absolute difference of the Sobel responses, over both directions.
pub fn loss_gradient(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    same_shape(pred.tensor(), gt.tensor())?;
    let gp = ops::matte_gradients(pred)?;
    let gg = ops::matte_gradients(gt)?;
    mean_abs_diff(&gp, &gg)
}

/// Ground truth resampled to the auxiliary head's resolution.
pub fn aux_target(aux_logits: &Tensor, gt: &AlphaMatte) -> Result<Tensor> {
    let (a, g) = (aux_logits.shape(), gt.shape());
    if a.c != 2 || a.n != g.n {
        return Err(Error::Shape(format!("aux logits {a} incompatible with matte {g}")));
    }
    if a.h > g.h || a.w > g.w {
        return Err(Error::Shape(format!("aux logits {a} larger than matte {g}")));
    }
    ops::bilinear_resize(gt.tensor(), a.h, a.w, false)
}

/// Cross-entropy between the auxiliary foreground probability and the
/// bilinearly downsampled ground truth.
pub fn loss_aux(aux_logits: &Tensor, gt: &AlphaMatte) -> Result<f64> {
    let target = aux_target(aux_logits, gt)?;
    let fg = arch::foreground(aux_logits)?;
    Ok(bce_value(fg.tensor(), &target, KL_EPSILON))
}

/// All five terms and their weighted sum.
pub fn loss_combined(
    pred: &AlphaMatte,
    aux_logits: &Tensor,
    gt: &AlphaMatte,
    image: &Tensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        alpha: loss_alpha(pred, gt)?,
        compositional: loss_compositional(pred, gt, image)?,
        kl: loss_kl(pred, gt)?,
        gradient: loss_gradient(pred, gt)?,
        aux: loss_aux(aux_logits, gt)?,
        total: 0.0,
    }
    .weighted(w))
}

/// Tape nodes of each loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub alpha: Var,
    pub compositional: Var,
    pub kl: Var,
    pub gradient: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            alpha: tape.scalar(self.alpha)?,
            compositional: tape.scalar(self.compositional)?,
            kl: tape.scalar(self.kl)?,
            gradient: tape.scalar(self.gradient)?,
            aux: match self.aux {
                Some(v) => tape.scalar(v)?,
                None => 0.0,
            },
            total: tape.scalar(self.total)?,
        })
    }
}

/// Foreground probability of two-channel logits on the tape.
pub fn tape_foreground(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax2(logits)?;
    tape.slice_channels(p, 1, 1)
}

pub fn tape_loss_alpha(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn tape_loss_compositional(tape: &mut Tape, pred: Var, gt: &Tensor, image: &Tensor) -> Result<Var> {
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g)?;
    let m = tape.mul_const(d, image.clone())?;
    let a = tape.abs(m);
    Ok(tape.mean(a))
}

pub fn tape_loss_kl(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    tape.bce(pred, gt.clone(), KL_EPSILON)
}

pub fn tape_loss_gradient(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    // The stencil is linear, so the response difference is the response of
    // the difference.
    let g = tape.constant(gt.clone());
    let d = tape.sub(pred, g)?;
    let k = tape.constant(ops::sobel_weights());
    let s = tape.conv2d(d, k, None, ConvSpec::standard(3, 1, 1))?;
    let a = tape.abs(s);
    Ok(tape.mean(a))
}

pub fn tape_loss_aux(tape: &mut Tape, aux_logits: Var, gt: &AlphaMatte) -> Result<Var> {
    let target = aux_target(tape.value(aux_logits), gt)?;
    let fg = tape_foreground(tape, aux_logits)?;
    tape.bce(fg, target, KL_EPSILON)
}

/// Records every loss term for network logits on the tape. Terms with a
/// zero weight are still recorded so they can be reported.
pub fn tape_loss_combined(
    tape: &mut Tape,
    logits: Var,
    aux_logits: Option<Var>,
    gt: &AlphaMatte,
    image: &Tensor,
    w: &LossWeights,
) -> Result<LossVars> {
    let pred = tape_foreground(tape, logits)?;
    let g = gt.tensor();
    let alpha = tape_loss_alpha(tape, pred, g)?;
    let compositional = tape_loss_compositional(tape, pred, g, image)?;
    let kl = tape_loss_kl(tape, pred, g)?;
    let gradient = tape_loss_gradient(tape, pred, g)?;
    let aux = aux_logits.map(|a| tape_loss_aux(tape, a, gt)).transpose()?;
    let mut terms = alloc::vec![
        (alpha, w.alpha),
        (compositional, w.compositional),
        (kl, w.kl),
        (gradient, w.gradient),
    ];
    if let Some(a) = aux {
        terms.push((a, w.aux));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(LossVars {
        alpha,
        compositional,
        kl,
        gradient,
        aux,
        total,
    })
}

/// Per-pixel norm applied to the gradient difference in the metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradientNorm {
    #[default]
    Euclidean,
    /// Sum of absolute components.
    L1,
}

/// Mean norm of the difference of Gaussian-derivative gradients
/// (σ = 1.4) between prediction and ground truth.
pub fn metric_gradient_error(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    metric_gradient_error_with(pred, gt, GradientNorm::Euclidean)
}

pub fn metric_gradient_error_with(pred: &AlphaMatte, gt: &AlphaMatte, norm: GradientNorm) -> Result<f64> {
    let (p, g) = (pred.tensor(), gt.tensor());
    same_shape(p, g)?;
    let (kx, ky) = ops::gaussian_derivative_kernels(METRIC_SIGMA)?;
    let d = p.zip_map(g, |a, b| a - b)?;
    let k = kx.shape().h;
    let spec = ConvSpec::standard(k, 1, 1);
    let gx = ops::conv2d(&d, &kx, None, &spec)?;
    let gy = ops::conv2d(&d, &ky, None, &spec)?;
    let sum: f64 = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            match norm {
                GradientNorm::Euclidean => libm::sqrt(x * x + y * y),
                GradientNorm::L1 => x.abs() + y.abs(),
            }
        })
        .sum();
    Ok(sum / d.len() as f64)
}

/// Mean absolute difference.
pub fn metric_mad(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    mean_abs_diff(pred.tensor(), gt.tensor())
}
