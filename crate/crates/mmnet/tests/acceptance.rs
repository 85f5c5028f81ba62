//! End-to-end acceptance checks. Runs as a plain binary so that one
//! PASS/FAIL line per criterion is always printed; exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmnet::bench::{bench, BenchOptions};
use mmnet::eval::{GRADIENT_UNIT, MAD_UNIT};
use mmnet::io::save_dataset;
use mmnet::{LoadedModel, ModelFile};
use mmnet_core::arch::{foreground, init_weights, FloatBackend, MMNet, MMNetConfig, ModelWeights};
use mmnet_core::autodiff::{grad_check, GradCheckConfig, Parameter, Tape, Var};
use mmnet_core::data::{augment, augment_with, sample_rng, synth_fixtures, AugmentConfig, AugmentParams, Sample};
use mmnet_core::objectives::{
    loss_alpha, loss_compositional, loss_gradient, loss_kl, metric_gradient_error, metric_mad, tape_foreground,
    tape_loss_alpha, tape_loss_aux, tape_loss_combined, tape_loss_compositional, tape_loss_gradient, tape_loss_kl,
    LossWeights,
};
use mmnet_core::ops::{self, conv2d, naive_conv2d, BatchNormParams, ConvSpec, BN_EPSILON};
use mmnet_core::qmodel::{fold_batch_norm, quantize_model, FoldedBackend};
use mmnet_core::quant::{QuantParams, SoftmaxLut};
use mmnet_core::train::{evaluate_step, train_loop, AdamConfig, TrainConfig, TrainEvent, TrainState};
use mmnet_core::{AlphaMatte, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi)).unwrap()
}

/// The overfit run, reused by the quantization and evaluation checks.
struct Trained {
    net: MMNet,
    weights: ModelWeights,
    fixtures: Vec<Sample>,
}

// 1
fn param_counts() -> Outcome {
    let mut lines = Vec::new();
    for (alpha, target) in [(0.5, 69_000.0), (0.75, 127_000.0), (1.0, 199_000.0), (1.4, 369_000.0)] {
        let net = MMNet::new(MMNetConfig::new(alpha, 256)).map_err(e)?;
        let n = net.param_count();
        let w = init_weights(&net, 0);
        ensure(w.param_count() == n, || format!("weights hold {} params, graph {n}", w.param_count()))?;
        let rel = (n as f64 - target) / target;
        lines.push(format!("α={alpha}: {n} ({:+.1}%)", rel * 100.0));
        ensure(rel.abs() <= 0.05, || format!("α={alpha}: {n} is {:+.1}% from {target}", rel * 100.0))?;
    }
    Ok(lines.join(", "))
}

// 2
fn shape_trace() -> Outcome {
    let expected: [(&str, &str, usize, usize); 17] = [
        ("Initial Block", "Conv 3×3, S2", 128, 32),
        ("Encoder 1", "DR [1, 2, 4, 8], S2", 64, 16),
        ("Encoder 2", "DR [1, 2, 4, 8], S1", 64, 24),
        ("Encoder 3", "DR [1, 2, 4, 8], S1", 64, 24),
        ("Encoder 4", "DR [1, 2, 4, 8], S1", 64, 24),
        ("Encoder 5", "DR [1, 2, 4], S2", 32, 40),
        ("Encoder 6", "DR [1, 2, 4], S1", 32, 40),
        ("Encoder 7", "DR [1, 2, 4], S1", 32, 40),
        ("Encoder 8", "DR [1, 2, 4], S1", 32, 40),
        ("Encoder 9", "DR [1, 2], S2", 16, 80),
        ("Encoder 10", "DR [1, 2], S1", 16, 80),
        ("Decoder 1", "Upsample ×2 (Skip 5)", 32, 128),
        ("Decoder 2", "Upsample ×2 (Skip 1)", 64, 80),
        ("Enhancement 1", "DR [1, 2, 4], S1", 64, 40),
        ("Enhancement 2", "DR [1, 2, 4], S1", 64, 40),
        ("Decoder 3", "Upsample ×4", 256, 16),
        ("Final Block", "Conv 1×1, Softmax", 256, 2),
    ];
    let net = MMNet::new(MMNetConfig::new(1.0, 256)).map_err(e)?;
    let rows = net.table_trace();
    ensure(rows.len() == 17, || format!("{} rows", rows.len()))?;
    for (r, (label, detail, size, c)) in rows.iter().zip(expected) {
        ensure((r.label.as_str(), r.detail.as_str(), r.h, r.w, r.c) == (label, detail, size, size, c), || {
            format!("row `{r}` differs from `{label} | {detail} | {size}×{size}, {c}`")
        })?;
    }
    // The traced shapes must be what a real forward pass produces.
    let w = init_weights(&net, 0);
    let x = Tensor::alloc(Shape::new(1, 3, 256, 256), 0.5).map_err(e)?;
    let out = net.forward_with(&mut FloatBackend::new(&w), &x, false).map_err(e)?;
    ensure(out.logits.shape() == Shape::new(1, 2, 256, 256), || format!("logits {}", out.logits.shape()))?;
    Ok("17 rows match".into())
}

// 3
fn conv_vs_naive() -> Outcome {
    let mut rng = sample_rng(3, 0);
    let cases = 256;
    let mut worst = 0.0f32;
    for case in 0..cases {
        let depthwise = rng.gen_bool(0.35);
        let pointwise = !depthwise && rng.gen_bool(0.2);
        let k = if pointwise { 1 } else { [1, 3, 3, 5][rng.gen_range(0..4)] };
        let stride = rng.gen_range(1..=2);
        let dilation = if k > 1 { [1, 2, 4, 8][rng.gen_range(0..4)] } else { 1 };
        let (n, c_in, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=20), rng.gen_range(1..=20));
        let c_out = if depthwise { c_in } else { rng.gen_range(1..=6) };
        let spec = if depthwise { ConvSpec::depthwise(k, stride, dilation, c_in) } else { ConvSpec::standard(k, stride, dilation) };
        let x = rand_tensor(&mut rng, Shape::new(n, c_in, h, w), -1.0, 1.0);
        let wt = rand_tensor(&mut rng, spec.weight_shape(c_in, c_out), -1.0, 1.0);
        let bias: Option<Vec<f32>> = rng.gen_bool(0.5).then(|| (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let fast = conv2d(&x, &wt, bias.as_deref(), &spec).map_err(e)?;
        let slow = naive_conv2d(&x, &wt, bias.as_deref(), &spec).map_err(e)?;
        let d = fast.max_abs_diff(&slow).map_err(e)?;
        worst = worst.max(d);
        ensure(d <= 1e-5, || format!("case {case} ({spec:?}, x {}): diff {d:e}", x.shape()))?;
    }
    Ok(format!("{cases} cases over stride {{1, 2}}, dilation {{1, 2, 4, 8}}, dense and depthwise, max diff {worst:.2e}"))
}

// 4
fn gradient_checks() -> Outcome {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> mmnet_core::Result<Var>>;
    let mut rng = sample_rng(4, 0);
    let s = |c| Shape::new(2, c, 8, 8);
    let param = |rng: &mut ChaCha8Rng, name: &str, shape, lo, hi| Parameter::new(name, rand_tensor(rng, shape, lo, hi));

    // Every op output is reduced with fixed random weights so that all
    // output elements contribute to the gradient.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> mmnet_core::Result<Var> {
        let mut rng = sample_rng(seed, 99);
        let r = rand_tensor(&mut rng, tape.value(y).shape(), -1.0, 1.0);
        let r = tape.constant(r);
        let m = tape.mul(y, r)?;
        Ok(tape.sum(m))
    }

    let gt = AlphaMatte::new(rand_tensor(&mut rng, Shape::new(2, 1, 8, 8), 0.05, 0.95)).map_err(e)?;
    let image = rand_tensor(&mut rng, s(3), 0.0, 1.0);
    let (gt_t, gt_c, image_c) = (gt.tensor().clone(), gt.clone(), image.clone());
    let frozen = BatchNormParams {
        gamma: vec![1.0; 3],
        beta: vec![0.0; 3],
        running_mean: vec![0.1, -0.2, 0.3],
        running_var: vec![0.5, 1.5, 2.0],
        epsilon: BN_EPSILON,
        momentum: 0.99,
    };
    let constant = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8), -1.0, 1.0);

    let mut cases: Vec<(&str, Vec<Parameter>, Build)> = vec![
        (
            "conv 3x3 + bias",
            vec![param(&mut rng, "x", s(3), -1.0, 1.0), param(&mut rng, "w", Shape::new(4, 3, 3, 3), -0.5, 0.5), param(&mut rng, "b", Shape::new(1, 4, 1, 1), -0.5, 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::standard(3, 1, 1))?;
                project(t, y, 1)
            }),
        ),
        (
            "conv 3x3 stride 2",
            vec![param(&mut rng, "x", s(2), -1.0, 1.0), param(&mut rng, "w", Shape::new(3, 2, 3, 3), -0.5, 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::standard(3, 2, 1))?;
                project(t, y, 2)
            }),
        ),
        (
            "depthwise dilated",
            vec![param(&mut rng, "x", s(3), -1.0, 1.0), param(&mut rng, "w", Shape::new(3, 1, 3, 3), -0.5, 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::depthwise(3, 1, 2, 3))?;
                project(t, y, 3)
            }),
        ),
        (
            "depthwise stride 2",
            vec![param(&mut rng, "x", s(3), -1.0, 1.0), param(&mut rng, "w", Shape::new(3, 1, 3, 3), -0.5, 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::depthwise(3, 2, 1, 3))?;
                project(t, y, 4)
            }),
        ),
        (
            "pointwise",
            vec![param(&mut rng, "x", s(4), -1.0, 1.0), param(&mut rng, "w", Shape::new(2, 4, 1, 1), -0.5, 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::pointwise())?;
                project(t, y, 5)
            }),
        ),
        (
            "batch norm (batch statistics)",
            vec![param(&mut rng, "x", s(3), -1.0, 1.0), param(&mut rng, "g", Shape::new(1, 3, 1, 1), 0.5, 1.5), param(&mut rng, "b", Shape::new(1, 3, 1, 1), -0.5, 0.5)],
            Box::new(|t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?;
                project(t, y, 6)
            }),
        ),
        (
            "batch norm (running statistics)",
            vec![param(&mut rng, "x", s(3), -1.0, 1.0), param(&mut rng, "g", Shape::new(1, 3, 1, 1), 0.5, 1.5), param(&mut rng, "b", Shape::new(1, 3, 1, 1), -0.5, 0.5)],
            Box::new(move |t, v| {
                let y = t.batch_norm_frozen(v[0], v[1], v[2], &frozen)?;
                project(t, y, 7)
            }),
        ),
        (
            "relu6",
            vec![param(&mut rng, "x", s(3), -2.0, 8.0)],
            Box::new(|t, v| {
                let y = t.relu6(v[0]);
                project(t, y, 8)
            }),
        ),
        (
            "concat",
            vec![param(&mut rng, "a", s(2), -1.0, 1.0), param(&mut rng, "b", s(3), -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.concat(v[0], v[1])?;
                project(t, y, 9)
            }),
        ),
        (
            "bilinear upsample",
            vec![param(&mut rng, "x", s(2), -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.resize(v[0], 16, 16, false)?;
                project(t, y, 10)
            }),
        ),
        (
            "bilinear downsample (align corners)",
            vec![param(&mut rng, "x", s(2), -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.resize(v[0], 5, 3, true)?;
                project(t, y, 11)
            }),
        ),
        (
            "softmax2",
            vec![param(&mut rng, "x", s(2), -3.0, 3.0)],
            Box::new(|t, v| {
                let y = t.softmax2(v[0])?;
                project(t, y, 12)
            }),
        ),
        (
            "slice channels",
            vec![param(&mut rng, "x", s(4), -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.slice_channels(v[0], 1, 2)?;
                project(t, y, 13)
            }),
        ),
        (
            "add, sub, mul",
            vec![param(&mut rng, "a", s(2), -1.0, 1.0), param(&mut rng, "b", s(2), -1.0, 1.0)],
            Box::new(|t, v| {
                let p = t.add(v[0], v[1])?;
                let m = t.sub(v[0], v[1])?;
                let y = t.mul(p, m)?;
                project(t, y, 14)
            }),
        ),
        (
            "mul by constant (broadcast)",
            vec![param(&mut rng, "x", s(1), -1.0, 1.0)],
            Box::new(move |t, v| {
                let y = t.mul_const(v[0], constant.clone())?;
                project(t, y, 15)
            }),
        ),
        (
            "abs + mean",
            vec![param(&mut rng, "x", s(2), -1.0, 1.0)],
            Box::new(|t, v| {
                let a = t.abs(v[0]);
                Ok(t.mean(a))
            }),
        ),
        (
            "bce",
            vec![param(&mut rng, "p", Shape::new(2, 1, 8, 8), 0.05, 0.95)],
            Box::new(move |t, v| t.bce(v[0], gt_t.clone(), 1e-6)),
        ),
        (
            "weighted sum",
            vec![param(&mut rng, "a", s(1), -1.0, 1.0), param(&mut rng, "b", s(1), -1.0, 1.0)],
            Box::new(|t, v| {
                let (a, b) = (t.sum(v[0]), t.mean(v[1]));
                t.weighted_sum(&[(a, 0.7), (b, 2.5)])
            }),
        ),
    ];

    let gtt = gt.tensor().clone();
    let logits = |rng: &mut ChaCha8Rng| param(rng, "logits", s(2), -2.0, 2.0);
    let loss_cases: Vec<(&str, Build)> = vec![
        ("L_alpha", {
            let g = gtt.clone();
            Box::new(move |t, v| {
                let p = tape_foreground(t, v[0])?;
                tape_loss_alpha(t, p, &g)
            })
        }),
        ("L_c", {
            let (g, im) = (gtt.clone(), image.clone());
            Box::new(move |t, v| {
                let p = tape_foreground(t, v[0])?;
                tape_loss_compositional(t, p, &g, &im)
            })
        }),
        ("L_KL", {
            let g = gtt.clone();
            Box::new(move |t, v| {
                let p = tape_foreground(t, v[0])?;
                tape_loss_kl(t, p, &g)
            })
        }),
        ("L_grad", {
            let g = gtt.clone();
            Box::new(move |t, v| {
                let p = tape_foreground(t, v[0])?;
                tape_loss_gradient(t, p, &g)
            })
        }),
        ("L_aux", {
            let g = gt.clone();
            Box::new(move |t, v| tape_loss_aux(t, v[0], &g))
        }),
    ];
    for (name, f) in loss_cases {
        let shape = if name == "L_aux" { Shape::new(2, 2, 4, 4) } else { s(2) };
        cases.push((name, vec![param(&mut rng, "logits", shape, -2.0, 2.0)], f));
    }
    cases.push((
        "combined loss",
        vec![logits(&mut rng), param(&mut rng, "aux", Shape::new(2, 2, 4, 4), -2.0, 2.0)],
        Box::new(move |t, v| {
            let w = LossWeights {
                alpha: 1.0,
                compositional: 0.5,
                kl: 0.8,
                gradient: 1.3,
                aux: 0.4,
            };
            Ok(tape_loss_combined(t, v[0], Some(v[1]), &gt_c, &image_c, &w)?.total)
        }),
    ));

    let mut worst = 0.0f64;
    let n = cases.len();
    for (i, (name, mut params, f)) in cases.into_iter().enumerate() {
        let cfg = GradCheckConfig {
            eps: 1e-3,
            tol: 1e-3,
            samples: Some(60),
            seed: i as u64,
        };
        let report = grad_check(&mut params, |t, v| f(t, v), cfg).map_err(e)?;
        worst = worst.max(report.max_error);
        ensure(report.passed() && report.checked >= 50, || format!("{name}: {:?}", report.failures.first()))?;
    }
    Ok(format!("{n} ops and losses, 60 coordinates each, max rel error {worst:.2e}"))
}

// 5
fn loss_identities() -> Outcome {
    let mut rng = sample_rng(5, 0);
    let a = AlphaMatte::new(rand_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 1.0)).map_err(e)?;
    let la = loss_alpha(&a, &a).map_err(e)?;
    ensure(la == 0.0, || format!("L_alpha(a, a) = {la}"))?;

    let other = AlphaMatte::new(rand_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 1.0)).map_err(e)?;
    let black = Tensor::alloc(Shape::new(1, 3, 16, 16), 0.0).map_err(e)?;
    let lc = loss_compositional(&a, &other, &black).map_err(e)?;
    ensure(lc == 0.0, || format!("L_c on black image = {lc}"))?;

    let half = AlphaMatte::new(Tensor::alloc(Shape::new(1, 1, 4, 4), 0.5).map_err(e)?).map_err(e)?;
    let kl = loss_kl(&half, &half).map_err(e)?;
    ensure((kl - std::f64::consts::LN_2).abs() <= 1e-6, || format!("KL(0.5, 0.5) = {kl}"))?;

    // Constant mattes: away from the zero-padded border both responses vanish.
    let (c1, c2) = (0.3f32, 0.8f32);
    let p1 = AlphaMatte::new(Tensor::alloc(Shape::new(1, 1, 12, 12), c1).map_err(e)?).map_err(e)?;
    let p2 = AlphaMatte::new(Tensor::alloc(Shape::new(1, 1, 12, 12), c2).map_err(e)?).map_err(e)?;
    let g1 = ops::matte_gradients(&p1).map_err(e)?;
    let g2 = ops::matte_gradients(&p2).map_err(e)?;
    let mut interior = 0.0f32;
    for c in 0..2 {
        for y in 1..11 {
            for x in 1..11 {
                interior = interior.max((g1.get(0, c, y, x) - g2.get(0, c, y, x)).abs());
            }
        }
    }
    ensure(interior <= 1e-7, || format!("interior gradient difference {interior}"))?;
    ensure(loss_gradient(&p1, &p1).map_err(e)? == 0.0, || "L_grad(a, a) != 0".into())?;
    Ok(format!("KL(0.5,0.5) - ln2 = {:.1e}, interior L_grad {interior:.1e}", kl - std::f64::consts::LN_2))
}

/// Zero-padded 2-D correlation at one pixel, in f64.
fn correlate(a: &[f64], h: usize, w: usize, k: &[f64], size: usize, y: usize, x: usize) -> f64 {
    let r = (size / 2) as isize;
    let mut acc = 0.0;
    for ky in 0..size {
        for kx in 0..size {
            let (yy, xx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc += k[ky * size + kx] * a[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

// 6
fn gradient_metric_oracle() -> Outcome {
    // Independent kernels: Sobel over 8, and unit-norm first derivatives of
    // a Gaussian with sigma 1.4 on an 11x11 grid.
    let sobel_x = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0].map(|v: f64| v / 8.0);
    let sobel_y: Vec<f64> = (0..9).map(|i| sobel_x[(i % 3) * 3 + i / 3]).collect();
    let (sigma, r) = (1.4f64, 5isize);
    let mut gx: Vec<f64> = Vec::new();
    for y in -r..=r {
        for x in -r..=r {
            let (xf, yf) = (x as f64, y as f64);
            gx.push(xf * (-(xf * xf + yf * yf) / (2.0 * sigma * sigma)).exp());
        }
    }
    let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
    gx.iter_mut().for_each(|v| *v /= norm);
    let gy: Vec<f64> = (0..121).map(|i| gx[(i % 11) * 11 + i / 11]).collect();

    let mut worst: f64 = 0.0;
    let fixtures = synth_fixtures(3, 48, 6).map_err(e)?;
    for (i, f) in fixtures.iter().enumerate() {
        let gt = &f.alpha;
        // A blurred, shifted copy keeps the soft edges but differs everywhere.
        let blurred = ops::bilinear_resize(&ops::bilinear_resize(gt.tensor(), 20, 20, false).map_err(e)?, 48, 48, false).map_err(e)?;
        let pred = AlphaMatte::clamped(blurred.map(|v| 0.9 * v + 0.03 * (i as f32 + 1.0))).map_err(e)?;
        let (h, w) = (48, 48);
        let p: Vec<f64> = pred.tensor().data().iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = gt.tensor().data().iter().map(|&v| v as f64).collect();
        let (mut metric, mut lgrad) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let dx = correlate(&p, h, w, &gx, 11, y, x) - correlate(&g, h, w, &gx, 11, y, x);
                let dy = correlate(&p, h, w, &gy, 11, y, x) - correlate(&g, h, w, &gy, 11, y, x);
                metric += (dx * dx + dy * dy).sqrt();
                for k in [&sobel_x[..], &sobel_y[..]] {
                    lgrad += (correlate(&p, h, w, k, 3, y, x) - correlate(&g, h, w, k, 3, y, x)).abs();
                }
            }
        }
        metric /= (h * w) as f64;
        lgrad /= (2 * h * w) as f64;
        let (m, l) = (metric_gradient_error(&pred, gt).map_err(e)?, loss_gradient(&pred, gt).map_err(e)?);
        worst = worst.max((m - metric).abs()).max((l - lgrad).abs());
        ensure((m - metric).abs() <= 1e-6, || format!("fixture {i}: metric {m} vs naive {metric}"))?;
        ensure((l - lgrad).abs() <= 1e-6, || format!("fixture {i}: L_grad {l} vs naive {lgrad}"))?;
        ensure(metric > 1e-3 && lgrad > 1e-3, || format!("fixture {i} is degenerate"))?;
        let (m0, l0) = (metric_gradient_error(gt, gt).map_err(e)?, loss_gradient(gt, gt).map_err(e)?);
        ensure(m0 == 0.0 && l0 == 0.0, || format!("identical mattes give {m0}, {l0}"))?;
    }
    Ok(format!("max |library - naive| {worst:.1e}; identical mattes score 0"))
}

// 7
fn overfit(trained: &mut Option<Trained>) -> Outcome {
    let net = MMNet::new(MMNetConfig::new(0.35, 64)).map_err(e)?;
    let fixtures = synth_fixtures(4, 64, 7).map_err(e)?;
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 1e-4,
            weight_decay: 4e-7,
            ..Default::default()
        },
        batch_size: 4,
        max_steps: 2000,
        seed: 0,
        augment: None,
        ..Default::default()
    };
    let mut state = TrainState::new(init_weights(&net, 1), cfg.adam);
    let start = Instant::now();
    let mut first_below = None;
    let report = train_loop(&net, &mut state, &fixtures, &cfg, |ev, _| {
        if let TrainEvent::Step(s) = ev {
            if s.loss.alpha < 0.05 && first_below.is_none() {
                first_below = Some(s.step);
            }
        }
        Ok(())
    })
    .map_err(e)?;
    let elapsed = start.elapsed();
    let last = evaluate_step(&net, &state, &fixtures, &cfg, cfg.max_steps).map_err(e)?.alpha;
    let inference: f64 = fixtures
        .iter()
        .map(|s| loss_alpha(&net.forward(&state.weights, &s.image).unwrap(), &s.alpha).unwrap())
        .sum::<f64>()
        / fixtures.len() as f64;
    *trained = Some(Trained {
        net,
        weights: state.weights.clone(),
        fixtures,
    });
    let summary = format!(
        "L_alpha {:.4} -> {last:.4} after {} steps (running-stat forward {inference:.4}), first < 0.05 at step {}, {:.0} s",
        report.initial.alpha,
        report.steps.len(),
        first_below.map_or("never".to_string(), |s| s.to_string()),
        elapsed.as_secs_f64()
    );
    ensure(last < 0.05, || summary.clone())?;
    ensure(elapsed <= Duration::from_secs(15 * 60), || format!("too slow: {summary}"))?;
    Ok(summary)
}

// 8
fn quantization(trained: &Option<Trained>) -> Outcome {
    // (a) every table entry equals the directly quantized softmax.
    let out = QuantParams::probability();
    let mut worst_f64 = 0u32;
    for (lo, hi) in [(-8.0f32, 8.0f32), (-3.1, 12.7), (-20.0, 0.5)] {
        let logits = QuantParams::from_range(lo, hi);
        let lut = SoftmaxLut::build(logits);
        for bg in 0..=255u8 {
            for fg in 0..=255u8 {
                let (b, f) = (logits.dequantize(bg), logits.dequantize(fg));
                let direct = out.quantize(ops::softmax2_foreground(b, f));
                let got = lut.lookup(bg, fg);
                ensure(got == direct, || format!("range ({lo}, {hi}): entry ({bg}, {fg}) = {got}, direct {direct}"))?;
                let p = 1.0 / (1.0 + (b as f64 - f as f64).exp());
                let exact = (p * 256.0).round().min(255.0) as u8;
                worst_f64 = worst_f64.max((got as i32 - exact as i32).unsigned_abs());
            }
        }
    }
    ensure(worst_f64 == 0, || format!("table differs from f64 softmax by {worst_f64} codes"))?;

    // (b) folding batch norm leaves the float forward unchanged. Whole
    // networks are compared on random input with non-trivial statistics.
    let mut rng = sample_rng(8, 0);
    let mut fold_worst = 0.0f32;
    let trained = trained.as_ref().ok_or("overfit model unavailable")?;
    for (alpha, seed) in [(0.35, 3u64), (0.5, 1), (1.0, 2)] {
        let net = MMNet::new(MMNetConfig::new(alpha, 64)).map_err(e)?;
        let mut t = init_weights(&net, seed).tensors();
        for (name, v) in t.iter_mut() {
            let range = match name.rsplit('/').next() {
                Some("gamma") | Some("var") => 0.5..1.5,
                Some("beta") | Some("mean") => -0.3..0.3,
                _ => continue,
            };
            v.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(range.clone()));
        }
        let w = ModelWeights::from_tensors(&net, t).map_err(e)?;
        let folded = fold_batch_norm(&net, &w).map_err(e)?;
        for i in 0..2 {
            let x = rand_tensor(&mut rng, Shape::new(1, 3, 64, 64), 0.0, 1.0);
            let a = net.forward(&w, &x).map_err(e)?;
            let logits = net.forward_with(&mut FoldedBackend::new(&folded), &x, false).map_err(e)?.logits;
            let b = foreground(&logits).map_err(e)?;
            let d = a.tensor().max_abs_diff(b.tensor()).map_err(e)?;
            fold_worst = fold_worst.max(d);
            ensure(d <= 1e-5, || format!("α={alpha} input {i}: folded forward differs by {d:e}"))?;
        }
    }
    // The trained network amplifies f32 rounding through its depth, so its
    // folded layers are compared one at a time on shared random input.
    let folded = fold_batch_norm(&trained.net, &trained.weights).map_err(e)?;
    let mut layer_worst = 0.0f32;
    for l in trained.net.layers() {
        let x = rand_tensor(&mut rng, Shape::new(1, l.in_channels, 16, 16), 0.0, 3.0);
        let w = trained.weights.param(&l.weight_name()).map_err(e)?;
        let bias = if l.bias { Some(trained.weights.param(&l.bias_name()).map_err(e)?.data()) } else { None };
        let mut a = conv2d(&x, w, bias, &l.conv).map_err(e)?;
        if l.batch_norm {
            a = ops::batch_norm_inference(&a, &trained.weights.bn_params(l).map_err(e)?).map_err(e)?;
        }
        let f = &folded[&l.name];
        let b = conv2d(&x, &f.weight, Some(&f.bias), &l.conv).map_err(e)?;
        let d = a.max_abs_diff(&b).map_err(e)?;
        layer_worst = layer_worst.max(d);
        ensure(d <= 1e-5, || format!("trained layer {}: folded conv differs by {d:e}", l.name))?;
    }
    let x = &trained.fixtures[0].image;
    let whole = trained
        .net
        .forward(&trained.weights, x)
        .map_err(e)?
        .tensor()
        .max_abs_diff(foreground(&trained.net.forward_with(&mut FoldedBackend::new(&folded), x, false).map_err(e)?.logits).map_err(e)?.tensor())
        .map_err(e)?;

    // (c) after quantization-aware fine-tuning of the overfit model, the
    // 8-bit network tracks the float one on the fixtures.
    let qat = TrainConfig {
        adam: AdamConfig {
            lr: 1e-4,
            weight_decay: 4e-7,
            ..Default::default()
        },
        batch_size: 4,
        max_steps: 2000,
        seed: 0,
        augment: None,
        quantization_aware: true,
        ..Default::default()
    };
    let mut state = TrainState::new(trained.weights.clone(), qat.adam);
    train_loop(&trained.net, &mut state, &trained.fixtures, &qat, |_, _| Ok(())).map_err(e)?;
    let images: Vec<Tensor> = trained.fixtures.iter().map(|s| s.image.clone()).collect();
    let q = quantize_model(&trained.net, &state.weights, &images, 0.99).map_err(e)?.model;
    let (mut mad, mut float_loss, mut int8_loss) = (0.0, 0.0, 0.0);
    for s in &trained.fixtures {
        let a = trained.net.forward(&state.weights, &s.image).map_err(e)?;
        let (b, counters) = q.forward(&trained.net, &s.image).map_err(e)?;
        ensure(counters.float_ops == 0 && counters.lut_lookups == 64 * 64, || format!("not on the int8 path: {counters:?}"))?;
        mad += metric_mad(&a, &b).map_err(e)?;
        float_loss += loss_alpha(&a, &s.alpha).map_err(e)?;
        int8_loss += loss_alpha(&b, &s.alpha).map_err(e)?;
    }
    let k = images.len() as f64;
    let (mad, float_loss, int8_loss) = (mad / k, float_loss / k, int8_loss / k);
    ensure(mad <= 0.05, || format!("quantized vs float mean |Δα| = {mad:.4} after {} QAT steps", qat.max_steps))?;
    Ok(format!(
        "LUT exact on 3×65,536 pairs; fold max |Δα| {fold_worst:.1e} on random nets, per-layer {layer_worst:.1e} on the trained net (whole-net {whole:.1e}, not gated); after 2000 QAT steps int8 vs float mean |Δα| {mad:.4} (L_alpha float {float_loss:.4}, int8 {int8_loss:.4})"
    ))
}

// 9
fn benchmark() -> Outcome {
    let net = MMNet::new(MMNetConfig::new(1.0, 256)).map_err(e)?;
    let w = init_weights(&net, 0);
    let calib: Vec<Tensor> = synth_fixtures(2, 256, 0).map_err(e)?.into_iter().map(|s| s.image).collect();
    let q = quantize_model(&net, &w, &calib, 0.99).map_err(e)?.model;
    let mut lines = Vec::new();
    for file in [ModelFile::float(&net, &w), ModelFile::quantized(&net, &q)] {
        let model = LoadedModel::from_file(&ModelFile::from_bytes(&file.to_bytes()).map_err(e)?).map_err(e)?;
        let r = bench(&model, &BenchOptions::default()).map_err(e)?;
        ensure(r.runs == 100 && r.per_run_ms.len() == 100 && r.warmup == 10 && r.threads == 1, || format!("{} runs", r.per_run_ms.len()))?;
        let (mean, std) = mmnet::bench::mean_std(&r.per_run_ms);
        ensure((mean - r.mean_ms).abs() < 1e-9 && (std - r.std_ms).abs() < 1e-9, || "mean/std not over the timed runs".into())?;
        ensure(r.deterministic, || format!("{} model output changed between runs", r.model_kind))?;
        ensure(r.jitter_ok, || format!("std {:.2} ≥ mean {:.2}", r.std_ms, r.mean_ms))?;
        if r.model_kind == "quantized" {
            ensure(r.counters.int8_convs > 0 && r.counters.float_ops == 0, || format!("{:?}", r.counters))?;
        }
        lines.push(format!("{} {:.1} ± {:.1} ms", r.model_kind, r.mean_ms, r.std_ms));
    }
    Ok(format!("α=1.0 @256, 100 runs after 10 warmup, 1 thread: {}", lines.join(", ")))
}

// 10
fn augmentation() -> Outcome {
    let size = 40;
    let mut worst = 0.0f32;
    for seed in 0..60u64 {
        let mut rng = sample_rng(seed, 1);
        // Smooth image whose red channel doubles as the matte.
        let (fx, fy, ph) = (rng.gen_range(0.05..0.3f32), rng.gen_range(0.05..0.3f32), rng.gen_range(0.0..6.0f32));
        let image = Tensor::from_fn(Shape::new(1, 3, 48, 56), |_, c, y, x| {
            let v = 0.5 + 0.5 * ((x as f32 * fx + y as f32 * fy + ph + c as f32).sin());
            (v * 255.0).round() / 255.0
        })
        .map_err(e)?;
        let alpha = AlphaMatte::new(image.slice_channels(0, 1).map_err(e)?).map_err(e)?;
        let sample = Sample::new(image, alpha, format!("s{seed}")).map_err(e)?;
        let cfg = AugmentConfig::with_target(size);
        let forced = AugmentParams {
            scale: rng.gen_range(1.0..1.15),
            angle_deg: rng.gen_range(-15.0..15.0),
            offset_x: rng.gen_range(0.0..1.0),
            offset_y: rng.gen_range(0.0..1.0),
            flip: rng.gen_bool(0.5),
        };
        let aug = augment_with(&sample, &cfg, &forced).map_err(e)?;
        let (img, a) = (aug.sample.image.plane(0, 0), aug.sample.alpha.tensor().data());
        ensure(a.iter().all(|v| (0.0..=1.0).contains(v)), || format!("seed {seed}: alpha out of [0, 1]"))?;
        for ((&i, &m), &inside) in img.iter().zip(a).zip(&aug.in_frame) {
            if inside {
                worst = worst.max((i - m).abs());
            }
        }
        ensure(worst <= 2.0 / 255.0, || format!("seed {seed}: registration off by {worst}"))?;

        let mut r1 = sample_rng(seed, 2);
        let mut r2 = sample_rng(seed, 2);
        let (x1, x2) = (augment(&sample, &cfg, &mut r1).map_err(e)?, augment(&sample, &cfg, &mut r2).map_err(e)?);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&x1.image) == bits(&x2.image) && bits(x1.alpha.tensor()) == bits(x2.alpha.tensor()), || format!("seed {seed}: not reproducible"))?;
        ensure(x1.alpha.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("seed {seed}: alpha out of [0, 1]"))?;
    }
    Ok(format!("60 seeds, max registration error {:.2}/255", worst * 255.0))
}

// 11
fn evaluation(trained: &Option<Trained>) -> Outcome {
    let trained = trained.as_ref().ok_or("overfit model unavailable")?;
    let dir = tempfile::tempdir().map_err(e)?;
    let model_path = dir.path().join("model.mmnet");
    ModelFile::float(&trained.net, &trained.weights).save(&model_path).map_err(e)?;
    let data = dir.path().join("data");
    let (h, w) = (800, 600);
    let samples: Vec<Sample> = synth_fixtures(3, 64, 11)
        .map_err(e)?
        .into_iter()
        .map(|s| {
            let image = ops::bilinear_resize(&s.image, h, w, false).unwrap().map(|v| (v * 255.0).round() / 255.0);
            let alpha = ops::bilinear_resize(s.alpha.tensor(), h, w, false).unwrap().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            Sample::new(image, AlphaMatte::new(alpha).unwrap(), s.id).unwrap()
        })
        .collect();
    save_dataset(&data, &samples).map_err(e)?;
    let report = run_eval(&model_path, &data)?;
    ensure(report["count"] == 3, || format!("{report}"))?;

    let model = LoadedModel::load(&model_path).map_err(e)?;
    for (s, r) in samples.iter().zip(report["images"].as_array().unwrap()) {
        ensure(r["height"] == h && r["width"] == w, || format!("evaluated at {}x{}", r["width"], r["height"]))?;
        let pred = model.infer(&s.image, true).map_err(e)?;
        let g = metric_gradient_error(&pred, &s.alpha).map_err(e)? / GRADIENT_UNIT;
        let m = metric_mad(&pred, &s.alpha).map_err(e)? / MAD_UNIT;
        let (rg, rm) = (r["gradient_error_e-3"].as_f64().unwrap(), r["mad_e-2"].as_f64().unwrap());
        ensure((rg - g).abs() <= 1e-9 * g.max(1.0) && (rm - m).abs() <= 1e-9 * m.max(1.0), || format!("{}: reported {rg}, {rm} vs {g}, {m}", s.id))?;
    }
    let mut summary = format!(
        "{}x{} synthetic set: gradient {:.2} (×1e-3), MAD {:.2} (×1e-2)",
        w,
        h,
        report["mean_gradient_error_e-3"].as_f64().unwrap(),
        report["mean_mad_e-2"].as_f64().unwrap()
    );
    // Optionally score a real dataset directory with a real model.
    if let (Ok(model), Ok(data)) = (std::env::var("MMNET_EVAL_MODEL"), std::env::var("MMNET_EVAL_DATA")) {
        let r = run_eval(Path::new(&model), Path::new(&data))?;
        summary.push_str(&format!(
            "; {data}: {} images, gradient {:.2}, MAD {:.2}",
            r["count"], r["mean_gradient_error_e-3"], r["mean_mad_e-2"]
        ));
    }
    Ok(summary)
}

fn run_eval(model: &Path, data: &Path) -> Result<serde_json::Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmnet"))
        .args(["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()])
        .output()
        .map_err(e)?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    serde_json::from_slice(&out.stdout).map_err(e)
}

fn main() {
    let mut trained = None;
    let mut failed = 0;
    let mut record = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {id:>2} {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1} s): {msg}");
            }
        }
    };
    record(1, "parameter counts", &mut param_counts);
    record(2, "block shape trace", &mut shape_trace);
    record(3, "conv2d vs naive", &mut conv_vs_naive);
    record(4, "gradient checks", &mut gradient_checks);
    record(5, "loss identities", &mut loss_identities);
    record(6, "gradient metric vs naive", &mut gradient_metric_oracle);
    record(7, "overfit", &mut || overfit(&mut trained));
    record(8, "quantization", &mut || quantization(&trained));
    record(9, "latency benchmark", &mut benchmark);
    record(10, "augmentation", &mut augmentation);
    record(11, "end-to-end evaluation", &mut || evaluation(&trained));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
