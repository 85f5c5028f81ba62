//! Little-endian model container shared by float models, training
//! checkpoints and quantized models.
//!
//! Layout: magic, version, kind, network config, architecture hash, section
//! counts, payload length, tensor table, named quantization parameters,
//! named scalars, payload.

use std::collections::BTreeMap;
use std::path::Path;

use mmnet_core::arch::{MMNet, MMNetConfig, ModelWeights};
use mmnet_core::qmodel::{QuantLayer, QuantModel, INPUT_NAME};
use mmnet_core::quant::{QuantParams, QuantTensor, SoftmaxLut};
use mmnet_core::train::{AdamConfig, AdamState, TrainState};
use mmnet_core::{Shape, Tensor};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 8] = *b"MMNETMDL";
pub const VERSION: u32 = 1;

const LUT_NAME: &str = "softmax/lut";
const LUT_LOGITS: &str = "softmax/logits";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const RANGE_LO: &str = "range.lo/";
const RANGE_HI: &str = "range.hi/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Float,
    Checkpoint,
    Quantized,
}

impl ModelKind {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<ModelKind> {
        [ModelKind::Float, ModelKind::Checkpoint, ModelKind::Quantized].into_iter().find(|k| k.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Float => "float",
            ModelKind::Checkpoint => "checkpoint",
            ModelKind::Quantized => "quantized",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    U8(QuantTensor),
}

impl TensorData {
    pub fn shape(&self) -> Shape {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::U8(q) => q.shape,
        }
    }

    pub fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(t) => 4 * t.len(),
            TensorData::U8(q) => q.data.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub config: MMNetConfig,
    pub arch_hash: u64,
    pub tensors: BTreeMap<String, TensorData>,
    pub qparams: BTreeMap<String, QuantParams>,
    pub scalars: BTreeMap<String, f64>,
}

impl ModelFile {
    fn empty(kind: ModelKind, net: &MMNet) -> ModelFile {
        ModelFile {
            kind,
            config: net.config,
            arch_hash: net.arch_hash(),
            tensors: BTreeMap::new(),
            qparams: BTreeMap::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn float(net: &MMNet, weights: &ModelWeights) -> ModelFile {
        let mut f = ModelFile::empty(ModelKind::Float, net);
        f.tensors = weights.tensors().into_iter().map(|(k, v)| (k, TensorData::F32(v))).collect();
        f
    }

    pub fn checkpoint(net: &MMNet, state: &TrainState) -> ModelFile {
        let mut f = ModelFile::float(net, &state.weights);
        f.kind = ModelKind::Checkpoint;
        let a = &state.adam;
        for ((name, m), v) in a.names.iter().zip(&a.m).zip(&a.v) {
            f.tensors.insert(format!("{ADAM_M}{name}"), TensorData::F32(m.clone()));
            f.tensors.insert(format!("{ADAM_V}{name}"), TensorData::F32(v.clone()));
        }
        let c = a.config;
        for (k, v) in [
            ("adam.step", a.step as f64),
            ("adam.lr", c.lr as f64),
            ("adam.beta1", c.beta1 as f64),
            ("adam.beta2", c.beta2 as f64),
            ("adam.eps", c.eps as f64),
            ("adam.weight_decay", c.weight_decay as f64),
        ] {
            f.scalars.insert(k.into(), v);
        }
        for (name, &(lo, hi)) in &state.activation_ranges {
            f.scalars.insert(format!("{RANGE_LO}{name}"), lo as f64);
            f.scalars.insert(format!("{RANGE_HI}{name}"), hi as f64);
        }
        f
    }

    pub fn quantized(net: &MMNet, model: &QuantModel) -> ModelFile {
        let mut f = ModelFile::empty(ModelKind::Quantized, net);
        for (name, l) in &model.layers {
            f.tensors.insert(format!("{name}/weight"), TensorData::U8(l.weight.clone()));
            let bias = Tensor::from_vec(Shape::new(1, l.bias.len(), 1, 1), l.bias.clone()).expect("bias vector shape");
            f.tensors.insert(format!("{name}/bias"), TensorData::F32(bias));
            f.qparams.insert(format!("{name}/output"), l.output);
        }
        f.qparams.insert(INPUT_NAME.into(), model.input);
        for (name, p) in &model.concats {
            f.qparams.insert(name.clone(), *p);
        }
        f.qparams.insert(LUT_LOGITS.into(), model.lut.logit_params);
        f.tensors.insert(
            LUT_NAME.into(),
            TensorData::U8(QuantTensor {
                shape: Shape::new(1, 1, 256, 256),
                data: model.lut.table().to_vec(),
                params: QuantParams::probability(),
            }),
        );
        f
    }

    /// Rebuilds the graph from the stored config and checks the hash.
    pub fn net(&self) -> Result<MMNet, FormatError> {
        let net = MMNet::new(self.config).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        if net.arch_hash() != self.arch_hash {
            return Err(FormatError::HashMismatch {
                expected: net.arch_hash(),
                found: self.arch_hash,
            });
        }
        Ok(net)
    }

    fn expect_kind(&self, kinds: &[ModelKind]) -> Result<(), FormatError> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(FormatError::WrongKind {
                expected: kinds[0].name(),
                found: self.kind.name(),
            })
        }
    }

    fn f32(&self, name: &str) -> Result<&Tensor, FormatError> {
        match self.tensors.get(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(TensorData::U8(_)) => Err(FormatError::Corrupt(format!("tensor {name} should be f32"))),
            None => Err(FormatError::Corrupt(format!("missing tensor {name}"))),
        }
    }

    fn scalar(&self, name: &str) -> Result<f64, FormatError> {
        self.scalars.get(name).copied().ok_or_else(|| FormatError::Corrupt(format!("missing scalar {name}")))
    }

    fn qparam(&self, name: &str) -> Result<QuantParams, FormatError> {
        self.qparams.get(name).copied().ok_or_else(|| FormatError::Corrupt(format!("missing quantization parameters {name}")))
    }

    /// Float weights from a float model or a checkpoint.
    pub fn to_weights(&self) -> Result<(MMNet, ModelWeights), FormatError> {
        self.expect_kind(&[ModelKind::Float, ModelKind::Checkpoint])?;
        let net = self.net()?;
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V))
            .map(|(k, v)| match v {
                TensorData::F32(t) => Ok((k.clone(), t.clone())),
                TensorData::U8(_) => Err(FormatError::Corrupt(format!("tensor {k} should be f32"))),
            })
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        let weights = ModelWeights::from_tensors(&net, tensors).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        Ok((net, weights))
    }

    pub fn to_train_state(&self) -> Result<(MMNet, TrainState), FormatError> {
        self.expect_kind(&[ModelKind::Checkpoint])?;
        let (net, weights) = self.to_weights()?;
        let config = AdamConfig {
            lr: self.scalar("adam.lr")? as f32,
            beta1: self.scalar("adam.beta1")? as f32,
            beta2: self.scalar("adam.beta2")? as f32,
            eps: self.scalar("adam.eps")? as f32,
            weight_decay: self.scalar("adam.weight_decay")? as f32,
        };
        let mut adam = AdamState::new(weights.params(), config);
        adam.step = self.scalar("adam.step")? as u64;
        for i in 0..adam.names.len() {
            let name = &adam.names[i];
            let (m, v) = (self.f32(&format!("{ADAM_M}{name}"))?, self.f32(&format!("{ADAM_V}{name}"))?);
            if m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape() {
                return Err(FormatError::Corrupt(format!("optimizer moments of {name} have the wrong shape")));
            }
            adam.m[i] = m.clone();
            adam.v[i] = v.clone();
        }
        let mut activation_ranges = BTreeMap::new();
        for (k, &lo) in &self.scalars {
            if let Some(name) = k.strip_prefix(RANGE_LO) {
                let hi = self.scalar(&format!("{RANGE_HI}{name}"))?;
                activation_ranges.insert(name.to_string(), (lo as f32, hi as f32));
            }
        }
        Ok((
            net,
            TrainState {
                weights,
                adam,
                activation_ranges,
            },
        ))
    }

    pub fn to_quant_model(&self) -> Result<(MMNet, QuantModel), FormatError> {
        self.expect_kind(&[ModelKind::Quantized])?;
        let net = self.net()?;
        let mut layers = BTreeMap::new();
        for spec in net.layers() {
            let name = &spec.name;
            let weight = match self.tensors.get(&format!("{name}/weight")) {
                Some(TensorData::U8(q)) => q.clone(),
                Some(_) => return Err(FormatError::Corrupt(format!("weight of {name} should be u8"))),
                // Layers left in float are simply absent.
                None => continue,
            };
            if weight.shape != spec.weight_shape() {
                return Err(FormatError::Corrupt(format!("weight of {name} has shape {}", weight.shape)));
            }
            let bias = self.f32(&format!("{name}/bias"))?.data().to_vec();
            if bias.len() != spec.out_channels {
                return Err(FormatError::Corrupt(format!("bias of {name} has {} entries", bias.len())));
            }
            let output = self.qparam(&format!("{name}/output"))?;
            layers.insert(
                name.clone(),
                QuantLayer {
                    weight,
                    bias,
                    output,
                    relu6: spec.relu6,
                },
            );
        }
        let concats = self.qparams.iter().filter(|(k, _)| k.ends_with("/concat")).map(|(k, v)| (k.clone(), *v)).collect();
        let table = match self.tensors.get(LUT_NAME) {
            Some(TensorData::U8(q)) => q.data.clone(),
            _ => return Err(FormatError::Corrupt("missing softmax table".into())),
        };
        let lut = SoftmaxLut::from_table(self.qparam(LUT_LOGITS)?, table).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        Ok((
            net,
            QuantModel {
                input: self.qparam(INPUT_NAME)?,
                layers,
                concats,
                lut,
            },
        ))
    }

    /// Bytes of per-layer tensors: weights, biases and normalization state.
    /// Optimizer moments and the softmax table are excluded.
    pub fn weight_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(ADAM_M) && !k.starts_with(ADAM_V) && k.as_str() != LUT_NAME)
            .map(|(_, t)| t.byte_len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(&MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.push(self.kind.code());
        head.extend_from_slice(&self.config.width_multiplier.to_le_bytes());
        head.extend_from_slice(&(self.config.input_size as u32).to_le_bytes());
        head.extend_from_slice(&(self.config.channel_rounding as u32).to_le_bytes());
        head.extend_from_slice(&self.arch_hash.to_le_bytes());
        head.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        head.extend_from_slice(&(self.qparams.len() as u32).to_le_bytes());
        head.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        let payload_len: usize = self.tensors.values().map(TensorData::byte_len).sum();
        head.extend_from_slice(&(payload_len as u64).to_le_bytes());

        let mut payload = Vec::with_capacity(payload_len);
        for (name, t) in &self.tensors {
            put_name(&mut head, name);
            let s = t.shape();
            head.push(matches!(t, TensorData::U8(_)) as u8);
            for d in [s.n, s.c, s.h, s.w] {
                head.extend_from_slice(&(d as u32).to_le_bytes());
            }
            if let TensorData::U8(q) = t {
                put_qparams(&mut head, &q.params);
            }
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            head.extend_from_slice(&(t.byte_len() as u64).to_le_bytes());
            match t {
                TensorData::F32(t) => t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                TensorData::U8(q) => payload.extend_from_slice(&q.data),
            }
        }
        for (name, p) in &self.qparams {
            put_name(&mut head, name);
            put_qparams(&mut head, p);
        }
        for (name, v) in &self.scalars {
            put_name(&mut head, name);
            head.extend_from_slice(&v.to_le_bytes());
        }
        head.extend_from_slice(&payload);
        head
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| FormatError::BadMagic)? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let kind = r.u8()?;
        let kind = ModelKind::from_code(kind).ok_or_else(|| FormatError::Corrupt(format!("unknown model kind {kind}")))?;
        let config = MMNetConfig {
            width_multiplier: r.f32()?,
            input_size: r.u32()? as usize,
            channel_rounding: r.u32()? as usize,
        };
        let arch_hash = r.u64()?;
        let (nt, nq, ns) = (r.u32()?, r.u32()?, r.u32()?);
        let payload_len = r.u64()? as usize;

        struct Entry {
            name: String,
            shape: Shape,
            params: Option<QuantParams>,
            offset: usize,
            len: usize,
        }
        let mut entries = Vec::with_capacity(nt.min(1 << 16) as usize);
        for _ in 0..nt {
            let name = r.name()?;
            let dtype = r.u8()?;
            let shape = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let params = match dtype {
                0 => None,
                1 => Some(r.qparams()?),
                d => return Err(FormatError::Corrupt(format!("tensor {name} has unknown dtype {d}"))),
            };
            let (offset, len) = (r.u64()? as usize, r.u64()? as usize);
            let elems = shape.validate().map_err(|e| FormatError::Corrupt(format!("tensor {name}: {e}")))?;
            let width = if params.is_some() { 1 } else { 4 };
            if elems.checked_mul(width) != Some(len) {
                return Err(FormatError::Corrupt(format!("tensor {name} declares {len} bytes for shape {shape}")));
            }
            if offset.checked_add(len).is_none_or(|end| end > payload_len) {
                return Err(FormatError::Corrupt(format!("tensor {name} lies outside the payload")));
            }
            entries.push(Entry {
                name,
                shape,
                params,
                offset,
                len,
            });
        }
        let mut qparams = BTreeMap::new();
        for _ in 0..nq {
            let name = r.name()?;
            let p = r.qparams()?;
            if qparams.insert(name.clone(), p).is_some() {
                return Err(FormatError::Corrupt(format!("duplicate quantization parameters {name}")));
            }
        }
        let mut scalars = BTreeMap::new();
        for _ in 0..ns {
            let name = r.name()?;
            let v = f64::from_le_bytes(r.array()?);
            if scalars.insert(name.clone(), v).is_some() {
                return Err(FormatError::Corrupt(format!("duplicate scalar {name}")));
            }
        }
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(FormatError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut spans: Vec<(usize, usize)> = entries.iter().filter(|e| e.len > 0).map(|e| (e.offset, e.offset + e.len)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(FormatError::Corrupt("tensor payloads overlap".into()));
        }

        let mut tensors = BTreeMap::new();
        for e in entries {
            let raw = &payload[e.offset..e.offset + e.len];
            let data = match e.params {
                Some(params) => TensorData::U8(QuantTensor {
                    shape: e.shape,
                    data: raw.to_vec(),
                    params,
                }),
                None => {
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
                    TensorData::F32(Tensor::from_vec(e.shape, v).map_err(|err| FormatError::Corrupt(err.to_string()))?)
                }
            };
            if tensors.insert(e.name.clone(), data).is_some() {
                return Err(FormatError::Corrupt(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(ModelFile {
            kind,
            config,
            arch_hash,
            tensors,
            qparams,
            scalars,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_qparams(out: &mut Vec<u8>, p: &QuantParams) {
    out.extend_from_slice(&p.scale.to_le_bytes());
    out.push(p.zero_point);
    out.extend_from_slice(&p.min.to_le_bytes());
    out.extend_from_slice(&p.max.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FormatError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<String, FormatError> {
        let n = u16::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Corrupt("name is not UTF-8".into()))
    }

    fn qparams(&mut self) -> Result<QuantParams, FormatError> {
        let scale = self.f32()?;
        let zero_point = self.u8()?;
        let (min, max) = (self.f32()?, self.f32()?);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(FormatError::Corrupt(format!("quantization scale {scale} is not positive")));
        }
        Ok(QuantParams {
            scale,
            zero_point,
            min,
            max,
        })
    }
}
