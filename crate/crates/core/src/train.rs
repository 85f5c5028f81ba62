//! Adam with decoupled weight decay and the deterministic training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::arch::{BnMode, MMNet, ModelWeights, TapeBackend};
use crate::autodiff::{Parameter, Tape};
use crate::data::{augment_with, sample_rng, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::objectives::{tape_loss_combined, LossBreakdown, LossWeights};
use crate::qmodel::INPUT_NAME;
use crate::quant::{QuantParams, DEFAULT_OBSERVER_MOMENTUM};
use crate::tensor::{AlphaMatte, Tensor};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay: `p -= lr * weight_decay * p` before each update.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("beta1, beta2 must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments of every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    /// Parameter names, in the order of the moment vectors.
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Parameter], config: AdamConfig) -> AdamState {
        let zeros = |p: &Parameter| Tensor::alloc(p.value.shape(), 0.0).expect("parameter shape is valid");
        AdamState {
            config,
            step: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    fn check(&self, params: &[Parameter]) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.names.len(),
                params.len()
            )));
        }
        for ((p, n), m) in params.iter().zip(&self.names).zip(&self.m) {
            if &p.name != n || p.value.shape() != m.shape() {
                return Err(Error::Contract(format!("optimizer slot {n} does not match parameter {}", p.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from `params[i].grad`. Fails without
/// touching anything if any gradient is not finite.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    state.check(params)?;
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(c.beta1 as f64, t as f64);
    let bc2 = 1.0 - libm::pow(c.beta2 as f64, t as f64);
    let decay = 1.0 - c.lr * c.weight_decay;
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            *w *= decay;
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            *w -= (c.lr as f64 * mhat / (libm::sqrt(vhat) + c.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Geometric augmentation; `None` trains on resized samples.
    pub augment: Option<AugmentConfig>,
    /// Fire a checkpoint event every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Train the graph the 8-bit path runs: batch norm folded with frozen
    /// running statistics, folded weights and all activations fake-quantized.
    pub quantization_aware: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_steps: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            augment: Some(AugmentConfig::default()),
            checkpoint_every: 0,
            quantization_aware: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub adam: AdamState,
    /// Activation ranges observed for fake quantization.
    pub activation_ranges: BTreeMap<String, (f32, f32)>,
}

impl TrainState {
    pub fn new(weights: ModelWeights, adam: AdamConfig) -> TrainState {
        let adam = AdamState::new(weights.params(), adam);
        TrainState {
            weights,
            adam,
            activation_ranges: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// Loss of one optimizer step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Notifications from [`train_loop`].
#[derive(Clone, Copy, Debug)]
pub enum TrainEvent {
    Step(StepLog),
    Checkpoint { step: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss on the first batch before any update of this run.
    pub initial: LossBreakdown,
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn last(&self) -> LossBreakdown {
        self.steps.last().map(|s| s.loss).unwrap_or(self.initial)
    }
}

/// Batch for `step`: a pure function of the seed, the step and the data.
pub fn make_batch(net: &MMNet, data: &[Sample], cfg: &TrainConfig, step: u64) -> Result<(Tensor, AlphaMatte)> {
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    let size = net.config.input_size;
    let mut rng = sample_rng(cfg.seed, step);
    let indices: Vec<usize> = if cfg.batch_size >= data.len() {
        (0..data.len()).collect()
    } else {
        let mut idx = rand::seq::index::sample(&mut rng, data.len(), cfg.batch_size).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut images = Vec::with_capacity(indices.len());
    let mut alphas = Vec::with_capacity(indices.len());
    for i in indices {
        let s = match &cfg.augment {
            Some(a) => {
                let a = AugmentConfig {
                    target_size: size,
                    ..*a
                };
                let p = a.draw(&mut rng);
                augment_with(&data[i], &a, &p)?.sample
            }
            None => data[i].resized(size)?,
        };
        images.push(s.image);
        alphas.push(s.alpha.into_tensor());
    }
    Ok((Tensor::stack(&images)?, AlphaMatte::new(Tensor::stack(&alphas)?)?))
}

/// Forward and loss on a tape in training mode.
fn record(
    net: &MMNet,
    state: &TrainState,
    cfg: &TrainConfig,
    image: &Tensor,
    alpha: &AlphaMatte,
    tape: &mut Tape,
) -> Result<(LossBreakdown, crate::autodiff::Var, Vec<(String, crate::ops::BatchStats)>, Vec<(String, Tensor)>)> {
    let ranges: BTreeMap<String, QuantParams> = state
        .activation_ranges
        .iter()
        .map(|(k, &(lo, hi))| (k.clone(), QuantParams::from_range(lo, hi)))
        .collect();
    let mut x = tape.constant(image.clone());
    if let Some(p) = ranges.get(INPUT_NAME).filter(|_| cfg.quantization_aware) {
        x = tape.fake_quant(x, p);
    }
    let mut backend = TapeBackend::new(tape, &state.weights, BnMode::Train);
    if cfg.quantization_aware {
        backend = backend.with_fake_quant(&ranges);
        backend.record_activations = true;
    }
    let out = net.forward_with(&mut backend, &x, true)?;
    let stats = core::mem::take(&mut backend.batch_stats);
    let acts: Vec<(String, crate::autodiff::Var)> = core::mem::take(&mut backend.activations);
    drop(backend);
    let mut acts: Vec<(String, Tensor)> = acts.into_iter().map(|(n, v)| (n, tape.value(v).clone())).collect();
    if cfg.quantization_aware {
        acts.push((String::from(INPUT_NAME), image.clone()));
    }
    let vars = tape_loss_combined(tape, out.logits, out.aux, alpha, image, &cfg.loss_weights)?;
    Ok((vars.breakdown(tape)?, vars.total, stats, acts))
}

/// Loss of the current weights on the batch for `step`, without updating
/// anything.
pub fn evaluate_step(net: &MMNet, state: &TrainState, data: &[Sample], cfg: &TrainConfig, step: u64) -> Result<LossBreakdown> {
    let (image, alpha) = make_batch(net, data, cfg, step)?;
    Ok(record(net, state, cfg, &image, &alpha, &mut Tape::new())?.0)
}

/// One optimizer step on the batch for the state's current step.
pub fn train_step(net: &MMNet, state: &mut TrainState, data: &[Sample], cfg: &TrainConfig) -> Result<StepLog> {
    let step = state.adam.step;
    let (image, alpha) = make_batch(net, data, cfg, step)?;
    let mut tape = Tape::new();
    let (loss, total, stats, acts) = record(net, state, cfg, &image, &alpha, &mut tape)?;
    tape.backward(total)?;
    let params = state.weights.params_mut();
    params.iter_mut().for_each(Parameter::zero_grad);
    tape.accumulate_into(params)?;
    adam_step(params, &mut state.adam)?;
    for (layer, s) in &stats {
        state.weights.update_running(layer, s)?;
    }
    let m = DEFAULT_OBSERVER_MOMENTUM;
    for (name, t) in acts {
        let (lo, hi) = t.min_max();
        state
            .activation_ranges
            .entry(name)
            .and_modify(|r| *r = (m * r.0 + (1.0 - m) * lo, m * r.1 + (1.0 - m) * hi))
            .or_insert((lo, hi));
    }
    Ok(StepLog { step, loss })
}

/// Runs steps until `cfg.max_steps` total steps have been taken. Resuming
/// from a saved state continues the exact same trajectory.
pub fn train_loop(
    net: &MMNet,
    state: &mut TrainState,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(&TrainEvent, &TrainState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    state.adam.config = cfg.adam;
    let initial = evaluate_step(net, state, data, cfg, state.adam.step)?;
    let mut steps = Vec::new();
    while state.adam.step < cfg.max_steps {
        let log = train_step(net, state, data, cfg)?;
        on_event(&TrainEvent::Step(log), state)?;
        steps.push(log);
        if cfg.checkpoint_every > 0 && state.adam.step % cfg.checkpoint_every == 0 {
            on_event(&TrainEvent::Checkpoint { step: state.adam.step }, state)?;
        }
    }
    Ok(TrainReport { initial, steps })
}

/// Uniform random draw helper for tests and tools that need a seeded
/// stream without pulling in the RNG crates.
pub fn uniform(seed: u64, stream: u64, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    let mut rng = sample_rng(seed, stream);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
