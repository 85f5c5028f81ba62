//! Post-training quantization of a whole network: batch-norm folding,
//! activation-range calibration, and the 8-bit inference backend.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::arch::{Backend, LayerSpec, MMNet, ModelWeights};
use crate::error::{Error, Result};
use crate::ops;
use crate::quant::{
    self, activation_clamp, qconv2d, qresize_bilinear, quantize_bias, requantize, QuantParams, QuantTensor,
    RangeObserver, SoftmaxLut,
};
use crate::tensor::{AlphaMatte, Shape, Tensor};

/// Name under which the network input's range is stored.
pub const INPUT_NAME: &str = "input";

/// Convolution with batch norm folded in: `y = conv(x, weight) + bias`,
/// optionally followed by ReLU6.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLayer {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub relu6: bool,
}

/// Folds every layer's batch norm into its convolution:
/// `w' = w·γ/√(σ²+ε)` per output channel and `b' = β − μ·γ/√(σ²+ε)`.
pub fn fold_batch_norm(net: &MMNet, weights: &ModelWeights) -> Result<BTreeMap<String, FoldedLayer>> {
    let mut out = BTreeMap::new();
    for l in net.layers() {
        let mut weight = weights.param(&l.weight_name())?.clone();
        let mut bias = if l.bias {
            weights.param(&l.bias_name())?.data().to_vec()
        } else {
            alloc::vec![0.0; l.out_channels]
        };
        if l.batch_norm {
            let bn = weights.bn_params(l)?;
            let per_out = weight.len() / l.out_channels;
            for (o, chunk) in weight.data_mut().chunks_mut(per_out).enumerate() {
                let scale = bn.gamma[o] as f64 / libm::sqrt(bn.running_var[o] as f64 + bn.epsilon as f64);
                chunk.iter_mut().for_each(|v| *v = (*v as f64 * scale) as f32);
                let shift = bn.beta[o] as f64 - bn.running_mean[o] as f64 * scale;
                bias[o] = (bias[o] as f64 * scale + shift) as f32;
            }
        }
        out.insert(
            l.name.clone(),
            FoldedLayer {
                weight,
                bias,
                relu6: l.relu6,
            },
        );
    }
    Ok(out)
}

/// Float inference over folded layers.
pub struct FoldedBackend<'a> {
    layers: &'a BTreeMap<String, FoldedLayer>,
    observer: Option<&'a mut dyn FnMut(&str, &Tensor)>,
}

impl<'a> FoldedBackend<'a> {
    pub fn new(layers: &'a BTreeMap<String, FoldedLayer>) -> FoldedBackend<'a> {
        FoldedBackend { layers, observer: None }
    }

    pub fn observed(layers: &'a BTreeMap<String, FoldedLayer>, observer: &'a mut dyn FnMut(&str, &Tensor)) -> FoldedBackend<'a> {
        FoldedBackend {
            layers,
            observer: Some(observer),
        }
    }
}

fn folded<'a>(layers: &'a BTreeMap<String, FoldedLayer>, name: &str) -> Result<&'a FoldedLayer> {
    layers.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

impl Backend for FoldedBackend<'_> {
    type Act = Tensor;

    fn shape(&self, x: &Tensor) -> Shape {
        x.shape()
    }

    fn conv(&mut self, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        let f = folded(self.layers, &layer.name)?;
        let mut y = ops::conv2d(x, &f.weight, Some(&f.bias), &layer.conv)?;
        if f.relu6 {
            y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&layer.name, &y);
        }
        Ok(y)
    }

    fn concat(&mut self, name: &str, parts: &[&Tensor]) -> Result<Tensor> {
        let (first, rest) = parts.split_first().ok_or_else(|| Error::Contract("empty concat".into()))?;
        let mut y = (*first).clone();
        for p in rest {
            y = crate::tensor::concat_channels(&y, p)?;
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(name, &y);
        }
        Ok(y)
    }

    fn upsample(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        ops::bilinear_resize(x, h, w, false)
    }
}

/// One quantized convolution. The bias stays in float and is converted to
/// the `i32` accumulator scale from the input's parameters at run time.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub weight: QuantTensor,
    pub bias: Vec<f32>,
    pub output: QuantParams,
    pub relu6: bool,
}

/// A network ready for 8-bit inference.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    pub input: QuantParams,
    pub layers: BTreeMap<String, QuantLayer>,
    /// Output parameters of each channel concatenation.
    pub concats: BTreeMap<String, QuantParams>,
    pub lut: SoftmaxLut,
}

/// Counts of integer operations executed, used to confirm that inference
/// ran on the 8-bit path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PathCounters {
    pub int8_convs: usize,
    pub int8_concats: usize,
    pub int8_resizes: usize,
    pub lut_lookups: usize,
    pub float_ops: usize,
}

/// Integer backend over a [`QuantModel`].
pub struct QuantBackend<'a> {
    model: &'a QuantModel,
    pub counters: PathCounters,
}

impl<'a> QuantBackend<'a> {
    pub fn new(model: &'a QuantModel) -> QuantBackend<'a> {
        QuantBackend {
            model,
            counters: PathCounters::default(),
        }
    }
}

impl Backend for QuantBackend<'_> {
    type Act = QuantTensor;

    fn shape(&self, x: &QuantTensor) -> Shape {
        x.shape
    }

    fn conv(&mut self, layer: &LayerSpec, x: &QuantTensor) -> Result<QuantTensor> {
        let q = self
            .model
            .layers
            .get(&layer.name)
            .ok_or_else(|| Error::MissingTensor(layer.name.clone()))?;
        let bias = quantize_bias(&q.bias, x.params.scale, q.weight.params.scale);
        self.counters.int8_convs += 1;
        qconv2d(x, &q.weight, &bias, &layer.conv, q.output, activation_clamp(&q.output, q.relu6))
    }

    fn concat(&mut self, name: &str, parts: &[&QuantTensor]) -> Result<QuantTensor> {
        let out = *self.model.concats.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        self.counters.int8_concats += 1;
        qconcat_all(parts, out)
    }

    fn upsample(&mut self, x: &QuantTensor, h: usize, w: usize) -> Result<QuantTensor> {
        self.counters.int8_resizes += 1;
        Ok(qresize_bilinear(x, h, w))
    }
}

/// Concatenates any number of quantized tensors into `out` parameters.
pub fn qconcat_all(parts: &[&QuantTensor], out: QuantParams) -> Result<QuantTensor> {
    let first = parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?;
    let s = first.shape;
    if let Some(p) = parts.iter().find(|p| (p.shape.n, p.shape.h, p.shape.w) != (s.n, s.h, s.w)) {
        return Err(Error::Shape(format!("cannot concat {s} with {}", p.shape)));
    }
    let re: Vec<QuantTensor> = parts.iter().map(|p| requantize(p, out)).collect();
    let c: usize = re.iter().map(|p| p.shape.c).sum();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * c * plane);
    for n in 0..s.n {
        for p in &re {
            let k = p.shape.c * plane;
            data.extend_from_slice(&p.data[n * k..(n + 1) * k]);
        }
    }
    Ok(QuantTensor {
        shape: s.with_c(c),
        data,
        params: out,
    })
}

impl QuantModel {
    /// 8-bit forward returning the alpha matte and the path counters.
    pub fn forward(&self, net: &MMNet, image: &Tensor) -> Result<(AlphaMatte, PathCounters)> {
        let x = quant::quantize(image, self.input);
        let mut backend = QuantBackend::new(self);
        let out = net.forward_with(&mut backend, &x, false)?;
        let probs = self.lut.apply(&out.logits)?;
        let mut counters = backend.counters;
        counters.lut_lookups += probs.data.len();
        Ok((AlphaMatte::clamped(quant::dequantize(&probs))?, counters))
    }

    /// Bytes of quantized weight payload.
    pub fn weight_bytes(&self) -> usize {
        self.layers.values().map(|l| l.weight.data.len()).sum()
    }
}

/// Outcome of [`quantize_model`].
#[derive(Clone, Debug)]
pub struct QuantizeReport {
    pub model: QuantModel,
    /// Activations whose calibrated range was empty and had to be widened.
    pub warnings: Vec<String>,
}

/// Observes every activation of the folded float network over the
/// calibration batches.
pub fn calibrate_activations(
    net: &MMNet,
    folded: &BTreeMap<String, FoldedLayer>,
    calibration: &[Tensor],
    momentum: f32,
) -> Result<BTreeMap<String, RangeObserver>> {
    if calibration.is_empty() {
        return Err(Error::Contract("calibration stream is empty".into()));
    }
    let mut observers: BTreeMap<String, RangeObserver> = BTreeMap::new();
    for batch in calibration {
        observers
            .entry(INPUT_NAME.to_string())
            .or_insert_with(|| RangeObserver::new(momentum))
            .observe(batch);
        let mut obs = |name: &str, t: &Tensor| {
            observers
                .entry(name.to_string())
                .or_insert_with(|| RangeObserver::new(momentum))
                .observe(t);
        };
        net.forward_with(&mut FoldedBackend::observed(folded, &mut obs), batch, false)?;
    }
    Ok(observers)
}

/// Folds batch norm, calibrates activation ranges on `calibration`, and
/// quantizes weights from their exact ranges.
pub fn quantize_model(net: &MMNet, weights: &ModelWeights, calibration: &[Tensor], momentum: f32) -> Result<QuantizeReport> {
    let folded = fold_batch_norm(net, weights)?;
    let observers = calibrate_activations(net, &folded, calibration, momentum)?;
    let mut warnings = Vec::new();
    let mut params = |name: &str| -> Result<QuantParams> {
        let (lo, hi) = observers
            .get(name)
            .and_then(|o| o.range())
            .ok_or_else(|| Error::MissingTensor(format!("no calibrated range for {name}")))?;
        let (p, widened) = QuantParams::from_range_checked(lo, hi);
        if widened {
            warnings.push(format!("{name}: degenerate range [{lo}, {hi}] widened"));
        }
        Ok(p)
    };
    let input = params(INPUT_NAME)?;
    let mut layers = BTreeMap::new();
    let mut concats = BTreeMap::new();
    for name in observers.keys().filter(|n| n.as_str() != INPUT_NAME) {
        let out = params(name)?;
        match folded.get(name) {
            Some(f) => {
                let wp = QuantParams::from_tensor(&f.weight);
                layers.insert(
                    name.clone(),
                    QuantLayer {
                        weight: quant::quantize(&f.weight, wp),
                        bias: f.bias.clone(),
                        output: out,
                        relu6: f.relu6,
                    },
                );
            }
            None => {
                concats.insert(name.clone(), out);
            }
        }
    }
    let logits = layers
        .get("final/conv")
        .map(|l| l.output)
        .ok_or_else(|| Error::MissingTensor("final/conv".into()))?;
    Ok(QuantizeReport {
        model: QuantModel {
            input,
            layers,
            concats,
            lut: SoftmaxLut::build(logits),
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{init_weights, FloatBackend, MMNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Weights with non-trivial batch-norm statistics.
    fn perturbed(net: &MMNet, seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = init_weights(net, seed).tensors();
        for (name, v) in t.iter_mut() {
            let range = if name.ends_with("/gamma") || name.ends_with("/var") {
                0.5..1.5
            } else if name.ends_with("/beta") || name.ends_with("/mean") {
                -0.3..0.3
            } else {
                continue;
            };
            v.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(range.clone()));
        }
        ModelWeights::from_tensors(net, t).unwrap()
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn folding_preserves_forward() {
        let net = MMNet::new(MMNetConfig::new(0.5, 64)).unwrap();
        let w = perturbed(&net, 1);
        let folded = fold_batch_norm(&net, &w).unwrap();
        let x = image(64, 2);
        let a = net.forward_with(&mut FloatBackend::new(&w), &x, true).unwrap();
        let b = net.forward_with(&mut FoldedBackend::new(&folded), &x, true).unwrap();
        let alpha = |l: &Tensor| crate::arch::foreground(l).unwrap().into_tensor();
        assert!(alpha(&a.logits).max_abs_diff(&alpha(&b.logits)).unwrap() <= 1e-5);
        // Raw logits and the auxiliary head only agree up to f32 rounding of
        // the folded weights, which grows with their magnitude.
        assert!(a.logits.max_abs_diff(&b.logits).unwrap() <= 1e-5 * a.logits.max_abs().max(1.0));
        let (aa, ba) = (a.aux.unwrap(), b.aux.unwrap());
        assert!(aa.max_abs_diff(&ba).unwrap() <= 1e-4 * aa.max_abs().max(1.0));
    }

    #[test]
    fn quantized_weights_within_half_step() {
        let net = MMNet::new(MMNetConfig::new(0.5, 64)).unwrap();
        let w = perturbed(&net, 3);
        let report = quantize_model(&net, &w, &[image(64, 4)], 0.99).unwrap();
        let folded = fold_batch_norm(&net, &w).unwrap();
        for (name, q) in &report.model.layers {
            let deq = quant::dequantize(&q.weight);
            let err = deq.max_abs_diff(&folded[name].weight).unwrap();
            assert!(err <= q.weight.params.scale / 2.0 * (1.0 + 1e-4), "{name}");
        }
        assert!(!report.model.layers.contains_key("aux/conv"));
    }

    #[test]
    fn quantized_model_runs_on_integer_path() {
        let net = MMNet::new(MMNetConfig::new(0.5, 64)).unwrap();
        let w = perturbed(&net, 5);
        let calib: Vec<Tensor> = (0..3).map(|i| image(64, 10 + i)).collect();
        let report = quantize_model(&net, &w, &calib, 0.99).unwrap();
        let (alpha, counters) = report.model.forward(&net, &calib[0]).unwrap();
        assert_eq!(alpha.shape(), Shape::new(1, 1, 64, 64));
        let convs = net.layers().iter().filter(|l| !l.name.starts_with("aux/")).count();
        assert_eq!(counters.int8_convs, convs);
        assert_eq!(counters.int8_resizes, 3);
        assert_eq!(counters.lut_lookups, 64 * 64);
        assert_eq!(counters.float_ops, 0);
        let (again, _) = report.model.forward(&net, &calib[0]).unwrap();
        assert_eq!(alpha, again);
        let float = net.forward(&w, &calib[0]).unwrap();
        let mad = float.tensor().data().iter().zip(alpha.tensor().data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / (64.0 * 64.0);
        assert!(mad <= 0.05, "{mad}");
    }

    #[test]
    fn degenerate_ranges_warn() {
        let net = MMNet::new(MMNetConfig::new(0.35, 32)).unwrap();
        let w = init_weights(&net, 1);
        let flat = Tensor::alloc(Shape::new(1, 3, 32, 32), 0.0).unwrap();
        let report = quantize_model(&net, &w, &[flat], 0.99).unwrap();
        assert!(report.warnings.iter().any(|m| m.starts_with(INPUT_NAME)));
        assert!(quantize_model(&net, &w, &[], 0.99).is_err());
    }

    #[test]
    fn multi_part_concat() {
        let p = QuantParams::from_range(0.0, 4.0);
        let mk = |c, v: f32| quant::quantize(&Tensor::alloc(Shape::new(2, c, 2, 2), v).unwrap(), QuantParams::from_range(0.0, v));
        let (a, b, c) = (mk(1, 1.0), mk(2, 2.0), mk(1, 4.0));
        let y = quant::dequantize(&qconcat_all(&[&a, &b, &c], p).unwrap());
        assert_eq!(y.shape(), Shape::new(2, 4, 2, 2));
        for n in 0..2 {
            for (ch, want) in [1.0, 2.0, 2.0, 4.0].iter().enumerate() {
                assert!(y.plane(n, ch).iter().all(|v| (v - want).abs() <= p.scale));
            }
        }
    }
}
