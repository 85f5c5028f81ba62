use mmnet_core::data::{augment, sample_rng, synth_fixtures, AugmentConfig};
use mmnet_core::objectives::{loss_alpha, loss_gradient, loss_kl, metric_gradient_error, metric_mad};
use mmnet_core::ops::{bilinear_resize, conv2d, naive_conv2d, softmax2, softmax2_foreground, ConvSpec};
use mmnet_core::quant::{dequantize, quantize, QuantParams, SoftmaxLut};
use mmnet_core::{AlphaMatte, Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn seeded(shape: Shape, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = sample_rng(seed, 17);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi)).unwrap()
}

fn matte(shape: Shape, seed: u64) -> AlphaMatte {
    AlphaMatte::new(seeded(shape, seed, 0.0, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive(
        c_in in 1usize..5, c_out in 1usize..5, h in 1usize..11, w in 1usize..11,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, dilation in 1usize..3,
        depthwise in any::<bool>(), seed in any::<u64>(),
    ) {
        let spec = if depthwise { ConvSpec::depthwise(k, stride, dilation, c_in) } else { ConvSpec::standard(k, stride, dilation) };
        let c_out = if depthwise { c_in } else { c_out };
        let x = seeded(Shape::new(1, c_in, h, w), seed, -1.0, 1.0);
        let wt = seeded(spec.weight_shape(c_in, c_out), seed ^ 1, -1.0, 1.0);
        let bias: Vec<f32> = (0..c_out).map(|i| i as f32 * 0.1 - 0.2).collect();
        let a = conv2d(&x, &wt, Some(&bias), &spec).unwrap();
        let b = naive_conv2d(&x, &wt, Some(&bias), &spec).unwrap();
        prop_assert_eq!(a.shape(), spec.out_shape(x.shape(), c_out));
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    #[test]
    fn softmax_is_a_distribution(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = seeded(Shape::new(2, 2, h, w), seed, -30.0, 30.0);
        let p = softmax2(&x).unwrap();
        for n in 0..2 {
            for (a, b) in p.plane(n, 0).iter().zip(p.plane(n, 1)) {
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                prop_assert!((a + b - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_foreground_is_monotone(bg in -50.0f32..50.0, fg in -50.0f32..50.0, d in 0.0f32..5.0) {
        prop_assert!(softmax2_foreground(bg, fg + d) >= softmax2_foreground(bg, fg));
    }

    #[test]
    fn quantization_error_is_half_a_step(lo in -20.0f32..0.0, span in 0.01f32..40.0, seed in any::<u64>()) {
        let p = QuantParams::from_range(lo, lo + span);
        let (rlo, rhi) = p.representable_range();
        let x = seeded(Shape::new(1, 2, 4, 4), seed, rlo, rhi);
        let back = dequantize(&quantize(&x, p));
        prop_assert!(x.max_abs_diff(&back).unwrap() <= p.scale * 0.5 + 1e-6);
    }

    #[test]
    fn lut_is_monotone_in_foreground(lo in -16.0f32..-0.5, hi in 0.5f32..16.0, bg in any::<u8>()) {
        let lut = SoftmaxLut::build(QuantParams::from_range(lo, hi));
        for fg in 0..255u8 {
            prop_assert!(lut.lookup(bg, fg + 1) >= lut.lookup(bg, fg));
        }
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20, v in -5.0f32..5.0, ac in any::<bool>()) {
        let x = Tensor::alloc(Shape::new(1, 2, h, w), v).unwrap();
        let y = bilinear_resize(&x, oh, ow, ac).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() <= 1e-5));
    }

    #[test]
    fn losses_and_metrics_are_nonnegative_and_zero_on_self(h in 3usize..12, w in 3usize..12, seed in any::<u64>()) {
        let s = Shape::new(1, 1, h, w);
        let (a, b) = (matte(s, seed), matte(s, seed ^ 7));
        for v in [loss_alpha(&a, &b).unwrap(), loss_gradient(&a, &b).unwrap(), metric_gradient_error(&a, &b).unwrap(), metric_mad(&a, &b).unwrap()] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        prop_assert!(loss_kl(&a, &b).unwrap().is_finite());
        prop_assert_eq!(loss_alpha(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(metric_mad(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(metric_gradient_error(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mad_is_symmetric(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let s = Shape::new(1, 1, h, w);
        let (a, b) = (matte(s, seed), matte(s, seed ^ 3));
        prop_assert_eq!(metric_mad(&a, &b).unwrap(), metric_mad(&b, &a).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn augmentation_keeps_alpha_in_range_and_is_reproducible(seed in any::<u64>(), target in 8usize..33) {
        let sample = &synth_fixtures(1, 40, seed % 1000).unwrap()[0];
        let cfg = AugmentConfig::with_target(target);
        let a = augment(sample, &cfg, &mut sample_rng(seed, 0)).unwrap();
        let b = augment(sample, &cfg, &mut sample_rng(seed, 0)).unwrap();
        prop_assert_eq!(a.image.shape(), Shape::new(1, 3, target, target));
        prop_assert!(a.alpha.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.image, b.image);
        prop_assert_eq!(a.alpha, b.alpha);
    }
}
