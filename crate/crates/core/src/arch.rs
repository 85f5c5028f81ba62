//! The MMNet graph: a block list derived from a width multiplier, the flat
//! list of convolution layers it expands to, named weights, and a forward
//! pass written once against the [`Backend`] trait.
//!
//! Every convolution layer is "conv, optional batch norm, optional ReLU6".
//! Backends decide how a layer is evaluated: plain floats, on an autodiff
//! tape, with batch norm folded, or in 8-bit integers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, BatchStats, ConvSpec, BN_EPSILON, BN_MOMENTUM};
use crate::quant::QuantParams;
use crate::tensor::{concat_channels, AlphaMatte, Shape, Tensor};

/// Width multiplier, input resolution and channel rounding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MMNetConfig {
    pub width_multiplier: f32,
    pub input_size: usize,
    pub channel_rounding: usize,
}

impl Default for MMNetConfig {
    fn default() -> Self {
        MMNetConfig {
            width_multiplier: 1.0,
            input_size: 256,
            channel_rounding: 8,
        }
    }
}

impl MMNetConfig {
    pub fn new(width_multiplier: f32, input_size: usize) -> MMNetConfig {
        MMNetConfig {
            width_multiplier,
            input_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!("input size {} must be a positive multiple of 16", self.input_size)));
        }
        if self.channel_rounding == 0 {
            return Err(Error::Config("channel rounding must be at least 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self, base: usize) -> usize {
        scale_channels(base, self.width_multiplier, self.channel_rounding)
    }
}

/// Scales a channel count by `alpha`, rounding to the nearest multiple of
/// `rounding` (never below `rounding`).
pub fn scale_channels(base: usize, alpha: f32, rounding: usize) -> usize {
    let scaled = base as f32 * alpha;
    if rounding > 1 {
        let r = rounding as f32;
        let k = libm::roundf(scaled / r) as usize;
        (k * rounding).max(rounding)
    } else {
        (libm::roundf(scaled) as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Initial,
    Encoder,
    Decoder,
    Refinement,
    Enhancement,
    Final,
    Auxiliary,
}

/// One block of the network. Channel counts are already scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    /// Layer-name prefix, e.g. `enc3`.
    pub name: String,
    /// Human-readable name, e.g. `Encoder 3`.
    pub label: String,
    pub kind: BlockKind,
    /// Index of the block whose output feeds this one; `None` is the image.
    pub input: Option<usize>,
    pub dilation_rates: Vec<usize>,
    pub stride: usize,
    pub in_channels: usize,
    /// Per-branch expansion width (encoder and enhancement blocks).
    pub expand_channels: usize,
    /// Width of the block's last convolution. Decoders with a skip emit
    /// this plus the refined skip's channels.
    pub out_channels: usize,
    /// Refinement block concatenated after upsampling (decoders only).
    pub skip_source: Option<usize>,
    pub upsample_factor: Option<usize>,
}

/// A convolution followed by optional batch norm and ReLU6.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub conv: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
    pub relu6: bool,
    pub bias: bool,
}

impl LayerSpec {
    fn new(name: String, conv: ConvSpec, c_in: usize, c_out: usize) -> LayerSpec {
        LayerSpec {
            name,
            conv,
            in_channels: c_in,
            out_channels: c_out,
            batch_norm: true,
            relu6: true,
            bias: false,
        }
    }

    fn linear(mut self) -> LayerSpec {
        self.relu6 = false;
        self
    }

    fn head(mut self) -> LayerSpec {
        self.batch_norm = false;
        self.relu6 = false;
        self.bias = true;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        self.conv.weight_shape(self.in_channels, self.out_channels)
    }

    pub fn weight_name(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn bn_name(&self, field: &str) -> String {
        format!("{}/bn/{field}", self.name)
    }
}

/// Whether a named tensor is trained or is a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

/// Base (width 1.0) encoder rows: expand, out, rates, stride.
const ENCODERS: [(usize, usize, &[usize], usize); 10] = [
    (16, 16, &[1, 2, 4, 8], 2),
    (16, 24, &[1, 2, 4, 8], 1),
    (24, 24, &[1, 2, 4, 8], 1),
    (24, 24, &[1, 2, 4, 8], 1),
    (32, 40, &[1, 2, 4], 2),
    (64, 40, &[1, 2, 4], 1),
    (64, 40, &[1, 2, 4], 1),
    (64, 40, &[1, 2, 4], 1),
    (80, 80, &[1, 2], 2),
    (120, 80, &[1, 2], 1),
];

/// The built graph: blocks in evaluation order plus their layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MMNet {
    pub config: MMNetConfig,
    pub blocks: Vec<BlockSpec>,
    layers: Vec<LayerSpec>,
    layer_index: BTreeMap<String, usize>,
    block_layers: Vec<Vec<usize>>,
}

impl MMNet {
    pub fn new(config: MMNetConfig) -> Result<MMNet> {
        config.validate()?;
        let ch = |base| config.channels(base);
        let mut blocks = Vec::new();
        let block = |name: String, label: String, kind, input, in_ch, out_ch| BlockSpec {
            name,
            label,
            kind,
            input,
            dilation_rates: Vec::new(),
            stride: 1,
            in_channels: in_ch,
            expand_channels: 0,
            out_channels: out_ch,
            skip_source: None,
            upsample_factor: None,
        };

        let mut b = block("init".into(), "Initial Block".into(), BlockKind::Initial, None, 3, ch(32));
        b.stride = 2;
        blocks.push(b);
        let mut prev_ch = ch(32);
        for (i, &(e, o, rates, s)) in ENCODERS.iter().enumerate() {
            let mut b = block(
                format!("enc{}", i + 1),
                format!("Encoder {}", i + 1),
                BlockKind::Encoder,
                Some(i),
                prev_ch,
                ch(o),
            );
            b.expand_channels = ch(e);
            b.dilation_rates = rates.to_vec();
            b.stride = s;
            prev_ch = ch(o);
            blocks.push(b);
        }
        let enc = |k: usize| k; // encoder k sits at block index k

        // Decoder 1 with refined skip from Encoder 5.
        let ref1 = blocks.len();
        blocks.push(block("ref1".into(), "Refinement 1".into(), BlockKind::Refinement, Some(enc(5)), ch(40), ch(64)));
        let dec1 = blocks.len();
        let mut b = block("dec1".into(), "Decoder 1".into(), BlockKind::Decoder, Some(enc(10)), ch(80), ch(64));
        b.skip_source = Some(ref1);
        b.upsample_factor = Some(2);
        blocks.push(b);

        let ref2 = blocks.len();
        blocks.push(block("ref2".into(), "Refinement 2".into(), BlockKind::Refinement, Some(enc(1)), ch(16), ch(40)));
        let dec2 = blocks.len();
        let mut b = block("dec2".into(), "Decoder 2".into(), BlockKind::Decoder, Some(dec1), ch(64) + ch(64), ch(40));
        b.skip_source = Some(ref2);
        b.upsample_factor = Some(2);
        blocks.push(b);

        let mut input = dec2;
        let mut in_ch = ch(40) + ch(40);
        for i in 1..=2 {
            let mut b = block(
                format!("enh{i}"),
                format!("Enhancement {i}"),
                BlockKind::Enhancement,
                Some(input),
                in_ch,
                ch(40),
            );
            b.expand_channels = ch(40);
            b.dilation_rates = vec![1, 2, 4];
            input = blocks.len();
            in_ch = ch(40);
            blocks.push(b);
        }

        let mut b = block("dec3".into(), "Decoder 3".into(), BlockKind::Decoder, Some(input), ch(40), ch(16));
        b.upsample_factor = Some(4);
        let dec3 = blocks.len();
        blocks.push(b);
        blocks.push(block("final".into(), "Final Block".into(), BlockKind::Final, Some(dec3), ch(16), 2));
        blocks.push(block("aux".into(), "Auxiliary Head".into(), BlockKind::Auxiliary, Some(enc(10)), ch(80), 2));

        let mut layers = Vec::new();
        let mut block_layers = Vec::new();
        for b in &blocks {
            let start = layers.len();
            layers.extend(layers_of(b));
            block_layers.push((start..layers.len()).collect());
        }
        let layer_index = layers.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
        Ok(MMNet {
            config,
            blocks,
            layers,
            layer_index,
            block_layers,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layer_index
            .get(name)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Every named tensor the weights must provide, in layer order.
    pub fn tensor_specs(&self) -> Vec<(String, Shape, TensorRole)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((l.weight_name(), l.weight_shape(), TensorRole::Param));
            let vec_shape = Shape::new(1, l.out_channels, 1, 1);
            if l.bias {
                out.push((l.bias_name(), vec_shape, TensorRole::Param));
            }
            if l.batch_norm {
                out.push((l.bn_name("gamma"), vec_shape, TensorRole::Param));
                out.push((l.bn_name("beta"), vec_shape, TensorRole::Param));
                out.push((l.bn_name("mean"), vec_shape, TensorRole::Buffer));
                out.push((l.bn_name("var"), vec_shape, TensorRole::Buffer));
            }
        }
        out
    }

    /// Trainable element count: conv weights, BN gamma/beta and head biases.
    pub fn param_count(&self) -> usize {
        self.tensor_specs()
            .iter()
            .filter(|(_, _, r)| *r == TensorRole::Param)
            .map(|(_, s, _)| s.len())
            .sum()
    }

    /// FNV-1a over the configuration and the layer list.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        let c = &self.config;
        h.write(&c.width_multiplier.to_bits().to_le_bytes());
        h.write(&(c.input_size as u64).to_le_bytes());
        h.write(&(c.channel_rounding as u64).to_le_bytes());
        for l in &self.layers {
            h.write(l.name.as_bytes());
            let k = &l.conv;
            for v in [
                k.kernel_h,
                k.kernel_w,
                k.stride,
                k.dilation,
                k.groups,
                l.in_channels,
                l.out_channels,
                l.batch_norm as usize,
                l.relu6 as usize,
                l.bias as usize,
            ] {
                h.write(&(v as u64).to_le_bytes());
            }
        }
        h.finish()
    }

    /// Output size of every block, computed from the specs alone.
    pub fn shape_trace(&self) -> Vec<TraceRow> {
        let s = self.config.input_size;
        let mut sizes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h, w, _) = b.input.map(|i| sizes[i]).unwrap_or((s, s, 3));
            let out = match b.kind {
                BlockKind::Initial | BlockKind::Encoder => (h.div_ceil(b.stride), w.div_ceil(b.stride), b.out_channels),
                BlockKind::Decoder => {
                    let f = b.upsample_factor.unwrap_or(1);
                    let skip = b.skip_source.map(|i| sizes[i].2).unwrap_or(0);
                    (h * f, w * f, b.out_channels + skip)
                }
                _ => (h, w, b.out_channels),
            };
            sizes.push(out);
        }
        self.blocks
            .iter()
            .zip(sizes)
            .map(|(b, (h, w, c))| TraceRow {
                label: b.label.clone(),
                detail: self.block_detail(b),
                kind: b.kind,
                h,
                w,
                c,
            })
            .collect()
    }

    fn block_detail(&self, b: &BlockSpec) -> String {
        let rates = |r: &[usize]| {
            let parts: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            format!("DR [{}], S{}", parts.join(", "), b.stride)
        };
        match b.kind {
            BlockKind::Initial => format!("Conv 3×3, S{}", b.stride),
            BlockKind::Encoder | BlockKind::Enhancement => rates(&b.dilation_rates),
            BlockKind::Decoder => {
                let f = b.upsample_factor.unwrap_or(1);
                match b.skip_source.and_then(|i| self.blocks[i].input) {
                    Some(src) => format!("Upsample ×{f} (Skip {})", self.blocks[src].label.trim_start_matches("Encoder ")),
                    None => format!("Upsample ×{f}"),
                }
            }
            BlockKind::Refinement => "DWConv 3×3, Conv 1×1".into(),
            BlockKind::Final => "Conv 1×1, Softmax".into(),
            BlockKind::Auxiliary => "Conv 1×1".into(),
        }
    }

    /// Rows matching the published layer table: auxiliary and refinement
    /// blocks are omitted.
    pub fn table_trace(&self) -> Vec<TraceRow> {
        self.shape_trace()
            .into_iter()
            .filter(|r| !matches!(r.kind, BlockKind::Refinement | BlockKind::Auxiliary))
            .collect()
    }

    /// Evaluates one block given its input and, for decoders, the refined
    /// skip tensor.
    pub fn run_block<B: Backend>(&self, backend: &mut B, index: usize, x: &B::Act, skip: Option<&B::Act>) -> Result<B::Act> {
        let b = &self.blocks[index];
        let layers: Vec<&LayerSpec> = self.block_layers[index].iter().map(|&i| &self.layers[i]).collect();
        match b.kind {
            BlockKind::Encoder | BlockKind::Enhancement => {
                let per_branch = layers.len().saturating_sub(1) / b.dilation_rates.len();
                let mut branches = Vec::with_capacity(b.dilation_rates.len());
                for chunk in layers[..layers.len() - 1].chunks(per_branch) {
                    let mut y = backend.conv(chunk[0], x)?;
                    for l in &chunk[1..] {
                        y = backend.conv(l, &y)?;
                    }
                    branches.push(y);
                }
                let refs: Vec<&B::Act> = branches.iter().collect();
                let cat = if refs.len() == 1 {
                    branches.pop().expect("one branch")
                } else {
                    backend.concat(&format!("{}/concat", b.name), &refs)?
                };
                backend.conv(layers[layers.len() - 1], &cat)
            }
            BlockKind::Decoder => {
                let y = backend.conv(layers[0], x)?;
                let s = backend.shape(&y);
                let f = b.upsample_factor.unwrap_or(1);
                let up = backend.upsample(&y, s.h * f, s.w * f)?;
                match skip {
                    Some(sk) => {
                        let ss = backend.shape(sk);
                        if (ss.h, ss.w) != (s.h * f, s.w * f) {
                            return Err(Error::Shape(format!(
                                "{}: skip {ss} does not match upsampled {}x{}",
                                b.label,
                                s.h * f,
                                s.w * f
                            )));
                        }
                        backend.concat(&format!("{}/concat", b.name), &[&up, sk])
                    }
                    None => Ok(up),
                }
            }
            _ => {
                let mut y = backend.conv(layers[0], x)?;
                for l in &layers[1..] {
                    y = backend.conv(l, &y)?;
                }
                Ok(y)
            }
        }
    }

    /// Runs the whole graph and returns the two-channel logits of the final
    /// and (optionally) auxiliary heads.
    pub fn forward_with<B: Backend>(&self, backend: &mut B, image: &B::Act, aux: bool) -> Result<Outputs<B::Act>> {
        let s = backend.shape(image);
        let size = self.config.input_size;
        if s.c != 3 || s.h != size || s.w != size {
            return Err(Error::Shape(format!("expected (n, 3, {size}, {size}) input, got {s}")));
        }
        let mut outs: Vec<Option<B::Act>> = Vec::with_capacity(self.blocks.len());
        let mut logits = None;
        let mut aux_logits = None;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kind == BlockKind::Auxiliary && !aux {
                outs.push(None);
                continue;
            }
            let x = match b.input {
                Some(j) => outs[j].as_ref().ok_or_else(|| Error::Contract(format!("{} input missing", b.label)))?,
                None => image,
            };
            let skip = b.skip_source.and_then(|j| outs[j].as_ref());
            let y = self.run_block(backend, i, x, skip)?;
            match b.kind {
                BlockKind::Final => {
                    logits = Some(y);
                    outs.push(None);
                }
                BlockKind::Auxiliary => {
                    aux_logits = Some(y);
                    outs.push(None);
                }
                _ => outs.push(Some(y)),
            }
        }
        Ok(Outputs {
            logits: logits.ok_or_else(|| Error::Contract("graph has no final block".into()))?,
            aux: aux_logits,
        })
    }

    /// Inference forward with running batch-norm statistics.
    pub fn forward(&self, weights: &ModelWeights, image: &Tensor) -> Result<AlphaMatte> {
        let out = self.forward_with(&mut FloatBackend::new(weights), image, false)?;
        foreground(&out.logits)
    }
}

fn layers_of(b: &BlockSpec) -> Vec<LayerSpec> {
    let n = &b.name;
    match b.kind {
        BlockKind::Initial => vec![LayerSpec::new(
            format!("{n}/conv"),
            ConvSpec::standard(3, b.stride, 1),
            b.in_channels,
            b.out_channels,
        )],
        BlockKind::Encoder | BlockKind::Enhancement => {
            let e = b.expand_channels;
            let mut out = Vec::new();
            for (i, &r) in b.dilation_rates.iter().enumerate() {
                out.push(LayerSpec::new(format!("{n}/b{i}/expand"), ConvSpec::pointwise(), b.in_channels, e));
                if b.kind == BlockKind::Encoder {
                    out.push(LayerSpec::new(format!("{n}/b{i}/dw_stride"), ConvSpec::depthwise(3, b.stride, 1, e), e, e));
                }
                out.push(LayerSpec::new(format!("{n}/b{i}/dw_dilated"), ConvSpec::depthwise(3, 1, r, e), e, e));
            }
            out.push(
                LayerSpec::new(
                    format!("{n}/project"),
                    ConvSpec::pointwise(),
                    e * b.dilation_rates.len(),
                    b.out_channels,
                )
                .linear(),
            );
            out
        }
        BlockKind::Decoder => vec![LayerSpec::new(format!("{n}/conv"), ConvSpec::pointwise(), b.in_channels, b.out_channels)],
        BlockKind::Refinement => vec![
            LayerSpec::new(format!("{n}/dw"), ConvSpec::depthwise(3, 1, 1, b.in_channels), b.in_channels, b.in_channels),
            LayerSpec::new(format!("{n}/pw"), ConvSpec::pointwise(), b.in_channels, b.out_channels),
        ],
        BlockKind::Final | BlockKind::Auxiliary => {
            vec![LayerSpec::new(format!("{n}/conv"), ConvSpec::pointwise(), b.in_channels, b.out_channels).head()]
        }
    }
}

/// One line of the shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub label: String,
    pub detail: String,
    pub kind: BlockKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<15} {:<24} {} × {}, {}", self.label, self.detail, self.h, self.w, self.c)
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Fnv1a {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a::new()
    }
}

/// Logits of the final head and, when requested, the auxiliary head.
#[derive(Clone, Debug)]
pub struct Outputs<A> {
    pub logits: A,
    pub aux: Option<A>,
}

/// Foreground channel of the softmax over two-channel logits.
pub fn foreground(logits: &Tensor) -> Result<AlphaMatte> {
    let p = ops::softmax2(logits)?;
    let s = p.shape();
    let mut out = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        out.extend_from_slice(p.plane(n, 1));
    }
    AlphaMatte::clamped(Tensor::from_vec(s.with_c(1), out)?)
}

/// Named trainable tensors plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    params: Vec<Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new(mut params: Vec<Parameter>, buffers: BTreeMap<String, Tensor>) -> Result<ModelWeights> {
        params.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = params.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Config(format!("duplicate tensor {}", w[0].name)));
        }
        if let Some(p) = params.iter().find(|p| buffers.contains_key(&p.name)) {
            return Err(Error::Config(format!("duplicate tensor {}", p.name)));
        }
        Ok(ModelWeights { params, buffers })
    }

    /// Builds weights from a flat name map, classifying by the graph.
    pub fn from_tensors(net: &MMNet, mut tensors: BTreeMap<String, Tensor>) -> Result<ModelWeights> {
        let mut params = Vec::new();
        let mut buffers = BTreeMap::new();
        for (name, shape, role) in net.tensor_specs() {
            let t = tensors.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            t.expect_shape(shape).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
            match role {
                TensorRole::Param => params.push(Parameter::new(name, t)),
                TensorRole::Buffer => {
                    buffers.insert(name, t);
                }
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        ModelWeights::new(params, buffers)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .binary_search_by(|p| p.name.as_str().cmp(name))
            .map(|i| &self.params[i].value)
            .map_err(|_| Error::MissingTensor(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).or_else(|_| self.buffers.get(name).ok_or_else(|| Error::MissingTensor(name.to_string())))
    }

    /// All tensors by name, parameters and buffers together.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.buffers.clone();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.clone());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bn_params(&self, layer: &LayerSpec) -> Result<BatchNormParams> {
        let v = |f: &str| self.get(&layer.bn_name(f)).map(|t| t.data().to_vec());
        Ok(BatchNormParams {
            gamma: v("gamma")?,
            beta: v("beta")?,
            running_mean: v("mean")?,
            running_var: v("var")?,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    /// Folds one batch's statistics into a layer's running estimates.
    pub fn update_running(&mut self, layer: &str, stats: &BatchStats) -> Result<()> {
        for (field, batch) in [("mean", &stats.mean), ("var", &stats.unbiased_var)] {
            let name = format!("{layer}/bn/{field}");
            let t = self.buffers.get_mut(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }

    /// Checks that every tensor the graph needs is present with the right
    /// shape and nothing else is.
    pub fn validate(&self, net: &MMNet) -> Result<()> {
        let specs = net.tensor_specs();
        for (name, shape, _) in &specs {
            self.get(name)?.expect_shape(*shape).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        let total = self.params.len() + self.buffers.len();
        if total != specs.len() {
            return Err(Error::Config(format!("weights hold {total} tensors, graph expects {}", specs.len())));
        }
        Ok(())
    }
}

/// Seeded initialization: uniform `±sqrt(6 / fan_in)` for every
/// convolution, zero biases and identity batch norm.
pub fn init_weights(net: &MMNet, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut buffers = BTreeMap::new();
    for l in net.layers() {
        let ws = l.weight_shape();
        let fan_in = (ws.c * ws.h * ws.w) as f32;
        let bound = libm::sqrtf(6.0 / fan_in);
        let w = Tensor::from_fn(ws, |_, _, _, _| rng.gen_range(-bound..bound)).expect("valid weight shape");
        params.push(Parameter::new(l.weight_name(), w));
        let vs = Shape::new(1, l.out_channels, 1, 1);
        let filled = |v| Tensor::alloc(vs, v).expect("valid vector shape");
        if l.bias {
            params.push(Parameter::new(l.bias_name(), filled(0.0)));
        }
        if l.batch_norm {
            params.push(Parameter::new(l.bn_name("gamma"), filled(1.0)));
            params.push(Parameter::new(l.bn_name("beta"), filled(0.0)));
            buffers.insert(l.bn_name("mean"), filled(0.0));
            buffers.insert(l.bn_name("var"), filled(1.0));
        }
    }
    ModelWeights::new(params, buffers).expect("layer names are unique")
}

/// How layers, concatenation and upsampling are evaluated.
pub trait Backend {
    type Act;
    fn shape(&self, x: &Self::Act) -> Shape;
    fn conv(&mut self, layer: &LayerSpec, x: &Self::Act) -> Result<Self::Act>;
    /// `name` identifies the concatenation for backends that keep per-tensor
    /// state such as quantization ranges.
    fn concat(&mut self, name: &str, parts: &[&Self::Act]) -> Result<Self::Act>;
    fn upsample(&mut self, x: &Self::Act, h: usize, w: usize) -> Result<Self::Act>;
}

fn concat_all(parts: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = parts.split_first().ok_or_else(|| Error::Contract("empty concat".into()))?;
    let mut out = (*first).clone();
    for p in rest {
        out = concat_channels(&out, p)?;
    }
    Ok(out)
}

/// Float inference with running batch-norm statistics.
pub struct FloatBackend<'a> {
    weights: &'a ModelWeights,
    /// Optional hook observing each named activation (layer outputs and
    /// concatenations), used for calibration.
    observer: Option<&'a mut dyn FnMut(&str, &Tensor)>,
}

impl<'a> FloatBackend<'a> {
    pub fn new(weights: &'a ModelWeights) -> FloatBackend<'a> {
        FloatBackend { weights, observer: None }
    }

    pub fn observed(weights: &'a ModelWeights, observer: &'a mut dyn FnMut(&str, &Tensor)) -> FloatBackend<'a> {
        FloatBackend {
            weights,
            observer: Some(observer),
        }
    }

    fn observe(&mut self, name: &str, t: &Tensor) {
        if let Some(f) = self.observer.as_mut() {
            f(name, t);
        }
    }
}

impl Backend for FloatBackend<'_> {
    type Act = Tensor;

    fn shape(&self, x: &Tensor) -> Shape {
        x.shape()
    }

    fn conv(&mut self, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        let w = self.weights.param(&layer.weight_name())?;
        let bias = if layer.bias { Some(self.weights.param(&layer.bias_name())?.data()) } else { None };
        let mut y = ops::conv2d(x, w, bias, &layer.conv)?;
        if layer.batch_norm {
            y = ops::batch_norm_inference(&y, &self.weights.bn_params(layer)?)?;
        }
        if layer.relu6 {
            y.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0));
        }
        self.observe(&layer.name, &y);
        Ok(y)
    }

    fn concat(&mut self, name: &str, parts: &[&Tensor]) -> Result<Tensor> {
        let y = concat_all(parts)?;
        self.observe(name, &y);
        Ok(y)
    }

    fn upsample(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        ops::bilinear_resize(x, h, w, false)
    }
}

/// Batch-norm handling on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; they are collected for the caller.
    Train,
    /// Normalize with running statistics.
    Frozen,
}

/// Records the forward pass on an autodiff tape.
pub struct TapeBackend<'a> {
    pub tape: &'a mut Tape,
    weights: &'a ModelWeights,
    mode: BnMode,
    vars: BTreeMap<String, Var>,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
    /// Fake quantization: batch norm is folded into the weights with its
    /// running statistics, folded weights use their exact range, and layer
    /// and concat outputs use the given ranges when present.
    fake_quant: Option<&'a BTreeMap<String, QuantParams>>,
    /// Layer outputs, recorded when `record_activations` is set.
    pub activations: Vec<(String, Var)>,
    pub record_activations: bool,
}

impl<'a> TapeBackend<'a> {
    pub fn new(tape: &'a mut Tape, weights: &'a ModelWeights, mode: BnMode) -> TapeBackend<'a> {
        TapeBackend {
            tape,
            weights,
            mode,
            vars: BTreeMap::new(),
            batch_stats: Vec::new(),
            fake_quant: None,
            activations: Vec::new(),
            record_activations: false,
        }
    }

    pub fn with_fake_quant(mut self, ranges: &'a BTreeMap<String, QuantParams>) -> TapeBackend<'a> {
        self.fake_quant = Some(ranges);
        self
    }

    /// The convolution as the 8-bit path runs it: batch norm folded in with
    /// its running statistics, then the folded weight fake-quantized over its
    /// exact range. Gradients reach the weight, gamma, beta and any bias.
    fn folded_fake_quant_conv(&mut self, layer: &LayerSpec, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (w, b) = if layer.batch_norm {
            let p = self.weights.bn_params(layer)?;
            let vec_shape = Shape::new(1, layer.out_channels, 1, 1);
            let inv: Vec<f32> = p
                .running_var
                .iter()
                .map(|&v| (1.0 / libm::sqrt(v as f64 + p.epsilon as f64)) as f32)
                .collect();
            let neg_mean_inv: Vec<f32> = p.running_mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let gamma = self.param(layer.bn_name("gamma"))?;
            let beta = self.param(layer.bn_name("beta"))?;
            let scale = self.tape.mul_const(gamma, Tensor::from_vec(vec_shape, inv)?)?;
            let shift = self.tape.mul_const(gamma, Tensor::from_vec(vec_shape, neg_mean_inv)?)?;
            let mut b = self.tape.add(beta, shift)?;
            if let Some(bias) = bias {
                let scaled = self.tape.mul(bias, scale)?;
                b = self.tape.add(b, scaled)?;
            }
            (self.tape.scale_rows(w, scale)?, Some(b))
        } else {
            (w, bias)
        };
        let p = QuantParams::from_tensor(self.tape.value(w));
        let wq = self.tape.fake_quant(w, &p);
        self.tape.conv2d(x, wq, b, layer.conv)
    }

    fn param(&mut self, name: String) -> Result<Var> {
        if let Some(&v) = self.vars.get(&name) {
            return Ok(v);
        }
        let value = self.weights.param(&name)?.clone();
        let v = self.tape.param(name.clone(), value);
        self.vars.insert(name, v);
        Ok(v)
    }
}

impl Backend for TapeBackend<'_> {
    type Act = Var;

    fn shape(&self, x: &Var) -> Shape {
        self.tape.value(*x).shape()
    }

    fn conv(&mut self, layer: &LayerSpec, x: &Var) -> Result<Var> {
        let w = self.param(layer.weight_name())?;
        let b = if layer.bias { Some(self.param(layer.bias_name())?) } else { None };
        let mut y = if self.fake_quant.is_some() {
            self.folded_fake_quant_conv(layer, *x, w, b)?
        } else {
            self.tape.conv2d(*x, w, b, layer.conv)?
        };
        if layer.batch_norm && self.fake_quant.is_none() {
            let gamma = self.param(layer.bn_name("gamma"))?;
            let beta = self.param(layer.bn_name("beta"))?;
            y = match self.mode {
                BnMode::Train => {
                    let (v, stats) = self.tape.batch_norm_train(y, gamma, beta, BN_EPSILON)?;
                    self.batch_stats.push((layer.name.clone(), stats));
                    v
                }
                BnMode::Frozen => {
                    let p = self.weights.bn_params(layer)?;
                    self.tape.batch_norm_frozen(y, gamma, beta, &p)?
                }
            };
        }
        if layer.relu6 {
            y = self.tape.relu6(y);
        }
        if let Some(p) = self.fake_quant.and_then(|r| r.get(&layer.name)) {
            y = self.tape.fake_quant(y, p);
        }
        if self.record_activations {
            self.activations.push((layer.name.clone(), y));
        }
        Ok(y)
    }

    fn concat(&mut self, name: &str, parts: &[&Var]) -> Result<Var> {
        let (first, rest) = parts.split_first().ok_or_else(|| Error::Contract("empty concat".into()))?;
        let mut out = **first;
        for p in rest {
            out = self.tape.concat(out, **p)?;
        }
        if let Some(p) = self.fake_quant.and_then(|r| r.get(name)) {
            out = self.tape.fake_quant(out, p);
        }
        if self.record_activations {
            self.activations.push((name.to_string(), out));
        }
        Ok(out)
    }

    fn upsample(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        self.tape.resize(*x, h, w, false)
    }
}
