//! Samples, compositing, geometric augmentation and synthetic fixtures.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{AlphaMatte, Shape, Tensor};

/// An RGB image with its ground-truth matte.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)`, values in `[0, 1]`.
    pub image: Tensor,
    pub alpha: AlphaMatte,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, alpha: AlphaMatte, id: impl Into<String>) -> Result<Sample> {
        let (i, a) = (image.shape(), alpha.shape());
        if i.n != 1 || i.c != 3 || (i.h, i.w) != (a.h, a.w) || a.n != 1 {
            return Err(Error::Shape(format!("image {i} and matte {a} do not form a sample")));
        }
        Ok(Sample {
            image,
            alpha,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Bilinear resize of image and matte to `size x size`.
    pub fn resized(&self, size: usize) -> Result<Sample> {
        if (self.height(), self.width()) == (size, size) {
            return Ok(self.clone());
        }
        let image = ops::bilinear_resize(&self.image, size, size, false)?;
        let alpha = AlphaMatte::clamped(ops::bilinear_resize(self.alpha.tensor(), size, size, false)?)?;
        Sample::new(image, alpha, self.id.clone())
    }
}

/// `I = αF + (1 − α)B` per channel.
pub fn composite(fg: &Tensor, bg: &Tensor, alpha: &AlphaMatte) -> Result<Tensor> {
    let (f, b, a) = (fg.shape(), bg.shape(), alpha.shape());
    if f != b || (f.n, f.h, f.w) != (a.n, a.h, a.w) {
        return Err(Error::Shape(format!("cannot composite {f} over {b} with matte {a}")));
    }
    let mut out = fg.clone();
    for n in 0..f.n {
        let al = alpha.tensor().plane(n, 0);
        for c in 0..f.c {
            let bp = bg.plane(n, c);
            for ((o, &bv), &av) in out.plane_mut(n, c).iter_mut().zip(bp).zip(al) {
                *o = av * *o + (1.0 - av) * bv;
            }
        }
    }
    Ok(out)
}

/// Random geometric augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f32,
    pub scale_max: f32,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f32,
    pub rotation_prob: f32,
    pub flip_prob: f32,
    pub target_size: usize,
    /// Rotate the scaled image before cropping (default) or rotate the crop.
    pub rotate_before_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 1.0,
            scale_max: 1.15,
            rotation_deg: 15.0,
            rotation_prob: 0.5,
            flip_prob: 0.5,
            target_size: 256,
            rotate_before_crop: true,
        }
    }
}

impl AugmentConfig {
    pub fn with_target(target_size: usize) -> AugmentConfig {
        AugmentConfig {
            target_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        if !(self.scale_min >= 1.0) || !(self.scale_max >= self.scale_min) || !self.scale_max.is_finite() {
            return Err(Error::Config(format!("scale range [{}, {}] must start at 1 or above", self.scale_min, self.scale_max)));
        }
        if !prob(self.rotation_prob) || !prob(self.flip_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.rotation_deg >= 0.0) || !self.rotation_deg.is_finite() {
            return Err(Error::Config(format!("rotation range {} must be non-negative", self.rotation_deg)));
        }
        if self.target_size == 0 {
            return Err(Error::Config("target size must be positive".into()));
        }
        Ok(())
    }

    /// Draws one transform.
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let rotate = rng.gen::<f32>() < self.rotation_prob;
        let angle = rng.gen_range(-self.rotation_deg..=self.rotation_deg);
        let slack = self.target_size as f32 * (scale - 1.0);
        let offset_x = rng.gen::<f32>() * slack;
        let offset_y = rng.gen::<f32>() * slack;
        let flip = rng.gen::<f32>() < self.flip_prob;
        AugmentParams {
            scale,
            angle_deg: if rotate { angle } else { 0.0 },
            offset_x,
            offset_y,
            flip,
        }
    }
}

/// One concrete augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f32,
    pub angle_deg: f32,
    /// Crop origin inside the scaled canvas, in pixels.
    pub offset_x: f32,
    pub offset_y: f32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> AugmentParams {
        AugmentParams {
            scale: 1.0,
            angle_deg: 0.0,
            offset_x: 0.0,
            offset_y: 0.0,
            flip: false,
        }
    }
}

/// Augmented sample plus a mask of output pixels whose source lies inside
/// the original frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    pub in_frame: Vec<bool>,
}

/// Random scale, rotation, crop and flip, applied identically to image and
/// matte after resizing to the target size.
pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let params = cfg.draw(rng);
    Ok(augment_with(s, cfg, &params)?.sample)
}

/// Applies a fixed transform. The whole chain is evaluated as one inverse
/// map per output pixel, so the image and matte are resampled once.
pub fn augment_with(s: &Sample, cfg: &AugmentConfig, p: &AugmentParams) -> Result<Augmented> {
    let t = cfg.target_size;
    let base = s.resized(t)?;
    let tf = t as f32;
    let canvas = tf * p.scale;
    let (sin, cos) = libm::sincosf(-p.angle_deg.to_radians());
    let rotate = |x: f32, y: f32, cx: f32, cy: f32| {
        let (dx, dy) = (x - cx, y - cy);
        (cos * dx - sin * dy + cx, sin * dx + cos * dy + cy)
    };

    let mut image = Tensor::alloc(Shape::new(1, 3, t, t), 0.0)?;
    let mut alpha = Tensor::alloc(Shape::new(1, 1, t, t), 0.0)?;
    let mut in_frame = alloc::vec![false; t * t];
    let src_img = &base.image;
    let src_a = base.alpha.tensor();
    for v in 0..t {
        for u in 0..t {
            let mut x = u as f32 + 0.5;
            let y = v as f32 + 0.5;
            if p.flip {
                x = tf - x;
            }
            let (qx, qy) = if cfg.rotate_before_crop {
                let (cx, cy) = (x + p.offset_x, y + p.offset_y);
                rotate(cx, cy, canvas / 2.0, canvas / 2.0)
            } else {
                let (rx, ry) = rotate(x, y, tf / 2.0, tf / 2.0);
                (rx + p.offset_x, ry + p.offset_y)
            };
            // Continuous coordinate in the resized frame.
            let (sx, sy) = (qx / p.scale, qy / p.scale);
            let inside = (0.0..=tf).contains(&sx) && (0.0..=tf).contains(&sy);
            let idx = v * t + u;
            in_frame[idx] = inside;
            let taps = Taps::new(sx - 0.5, sy - 0.5, t);
            for c in 0..3 {
                image.data_mut()[c * t * t + idx] = taps.sample(src_img.plane(0, c), t).clamp(0.0, 1.0);
            }
            if inside {
                alpha.data_mut()[idx] = taps.sample(src_a.plane(0, 0), t).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Augmented {
        sample: Sample::new(image, AlphaMatte::new(alpha)?, base.id)?,
        in_frame,
    })
}

/// Bilinear taps with edge replication.
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f32,
    fy: f32,
}

impl Taps {
    fn new(x: f32, y: f32, size: usize) -> Taps {
        let hi = (size - 1) as f32;
        let (x, y) = (x.clamp(0.0, hi), y.clamp(0.0, hi));
        let (x0, y0) = (libm::floorf(x) as usize, libm::floorf(y) as usize);
        Taps {
            x0,
            x1: (x0 + 1).min(size - 1),
            y0,
            y1: (y0 + 1).min(size - 1),
            fx: x - x0 as f32,
            fy: y - y0 as f32,
        }
    }

    fn sample(&self, plane: &[f32], w: usize) -> f32 {
        let at = |y: usize, x: usize| plane[y * w + x];
        let top = at(self.y0, self.x0) * (1.0 - self.fx) + at(self.y0, self.x1) * self.fx;
        let bottom = at(self.y1, self.x0) * (1.0 - self.fx) + at(self.y1, self.x1) * self.fx;
        top * (1.0 - self.fy) + bottom * self.fy
    }
}

/// Independent random stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A synthetic sample together with its layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub sample: Sample,
    pub fg: Tensor,
    pub bg: Tensor,
}

/// Rounds to the nearest multiple of 1/255, as an 8-bit file would.
fn to_u8_grid(x: f32) -> f32 {
    libm::roundf(x.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Soft-edged head-and-shoulders mattes composited over textured
/// backgrounds. Deterministic in `seed`.
pub fn synth_fixtures(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(synth_fixture_layers(n, size, seed)?.into_iter().map(|f| f.sample).collect())
}

pub fn synth_fixture_layers(n: usize, size: usize, seed: u64) -> Result<Vec<Fixture>> {
    if size < 8 {
        return Err(Error::Config(format!("fixture size {size} is below 8 px")));
    }
    (0..n).map(|i| synth_one(size, sample_rng(seed, i as u64), i)).collect()
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    /// Approximate signed distance in pixels, negative inside.
    fn distance(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy);
        let rho = libm::sqrtf((u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry));
        (rho - 1.0) * self.rx.min(self.ry)
    }
}

fn synth_one(size: usize, mut rng: ChaCha8Rng, index: usize) -> Result<Fixture> {
    let s = size as f32;
    let mut ellipse = |cx: f32, cy: f32, rx: f32, ry: f32| {
        let a: f32 = rng.gen_range(-0.4..0.4);
        Ellipse {
            cx: cx * s,
            cy: cy * s,
            rx: rx * s,
            ry: ry * s,
            cos: libm::cosf(a),
            sin: libm::sinf(a),
        }
    };
    let head = ellipse(0.5, 0.4, 0.16, 0.2);
    let body = ellipse(0.5, 0.95, 0.36, 0.3);
    let softness = rng.gen_range(0.8..3.0f32) * s / 64.0;
    let alpha = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let d = head.distance(px, py).min(body.distance(px, py));
        to_u8_grid(0.5 - d / (2.0 * softness))
    })?;

    let mut colour = || [rng.gen_range(0.1..0.9f32), rng.gen_range(0.1..0.9f32), rng.gen_range(0.1..0.9f32)];
    let (fg_a, fg_b, bg_a, bg_b) = (colour(), colour(), colour(), colour());
    let freq = rng.gen_range(2.0..6.0f32) * core::f32::consts::TAU / s;
    let phase = rng.gen_range(0.0..core::f32::consts::TAU);
    let fg = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let t = y as f32 / s;
        let ripple = 0.05 * libm::sinf(freq * 0.5 * x as f32 + phase);
        to_u8_grid(fg_a[c] * (1.0 - t) + fg_b[c] * t + ripple)
    })?;
    let bg = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let stripes = 0.5 + 0.5 * libm::sinf(freq * (x as f32 + 0.6 * y as f32) + phase);
        to_u8_grid(bg_a[c] * stripes + bg_b[c] * (1.0 - stripes))
    })?;
    let matte = AlphaMatte::new(alpha)?;
    let image = composite(&fg, &bg, &matte)?.map(to_u8_grid);
    Ok(Fixture {
        sample: Sample::new(image, matte, format!("synth_{index:04}"))?,
        fg,
        bg,
    })
}
