//! Single-thread latency harness: fixed random input, warmup excluded,
//! mean and standard deviation over the timed runs.

use std::time::Instant;

use mmnet_core::qmodel::PathCounters;
use mmnet_core::train::uniform;
use mmnet_core::{Shape, Tensor};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LoadedModel;

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub allow_multithread: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            runs: 100,
            warmup: 10,
            threads: 1,
            allow_multithread: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub int8_convs: usize,
    pub int8_concats: usize,
    pub int8_resizes: usize,
    pub lut_lookups: usize,
    pub float_ops: usize,
}

impl From<PathCounters> for Counters {
    fn from(c: PathCounters) -> Counters {
        Counters {
            int8_convs: c.int8_convs,
            int8_concats: c.int8_concats,
            int8_resizes: c.int8_resizes,
            lut_lookups: c.lut_lookups,
            float_ops: c.float_ops,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub model_kind: &'static str,
    pub width_multiplier: f32,
    pub input_size: usize,
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub per_run_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Sample standard deviation over the timed runs.
    pub std_ms: f64,
    /// Every timed run produced the same bytes as the first.
    pub deterministic: bool,
    /// `std < mean`; false flags pathological jitter.
    pub jitter_ok: bool,
    /// Operation counts of one inference.
    pub counters: Counters,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Input("--runs must be at least 1".into()));
        }
        if self.threads == 0 || (self.threads != 1 && !self.allow_multithread) {
            return Err(Error::Input(format!(
                "benchmarks run on exactly one thread; got --threads {} (pass --allow-multithread to override)",
                self.threads
            )));
        }
        Ok(())
    }
}

/// Inference is single-threaded, so `threads` above 1 (with
/// `allow_multithread`) is only echoed in the report.
pub fn bench(model: &LoadedModel, opts: &BenchOptions) -> Result<BenchReport> {
    opts.validate()?;
    let s = model.input_size();
    let shape = Shape::new(1, 3, s, s);
    let input = Tensor::from_vec(shape, uniform(opts.seed, 0, shape.len(), 0.0, 1.0))?;

    for _ in 0..opts.warmup {
        model.predict(&input)?;
    }
    let mut per_run_ms = Vec::with_capacity(opts.runs);
    let mut reference = None;
    let mut deterministic = true;
    let mut counters = Counters::default();
    for _ in 0..opts.runs {
        let t = Instant::now();
        let (alpha, c) = model.predict(&input)?;
        per_run_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let bits: Vec<u32> = alpha.tensor().data().iter().map(|v| v.to_bits()).collect();
        match &reference {
            None => {
                reference = Some(bits);
                counters = c.into();
            }
            Some(r) => deterministic &= *r == bits && counters == Counters::from(c),
        }
    }
    let (mean_ms, std_ms) = mean_std(&per_run_ms);
    Ok(BenchReport {
        model_kind: model.kind.name(),
        width_multiplier: model.net.config.width_multiplier,
        input_size: s,
        runs: opts.runs,
        warmup: opts.warmup,
        threads: opts.threads,
        per_run_ms,
        mean_ms,
        std_ms,
        deterministic,
        jitter_ok: std_ms < mean_ms,
        counters,
    })
}
