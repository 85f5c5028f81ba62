//! Command-line surface. Every command writes its structured result to the
//! given writer; errors carry their exit code.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mmnet_core::arch::{init_weights, MMNet, MMNetConfig};
use mmnet_core::data::{synth_fixtures, Sample};
use mmnet_core::objectives::{metric_mad, LossBreakdown};
use mmnet_core::qmodel::quantize_model;
use mmnet_core::quant::DEFAULT_OBSERVER_MOMENTUM;
use mmnet_core::train::{train_loop, TrainEvent, TrainState};
use mmnet_core::Tensor;
use serde_json::json;

use crate::bench::{bench, BenchOptions};
use crate::config::TrainFile;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::format::ModelFile;
use crate::io::{load_dataset, read_rgb, save_dataset, write_matte};
use crate::model::LoadedModel;

#[derive(Debug, Parser)]
#[command(name = "mmnet", version, about = "Portrait matting: inference, training, evaluation, quantization, benchmarking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Predict an alpha matte and write it as 8-bit grayscale PNG.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resize the matte back to the input image's resolution.
        #[arg(long)]
        original_size: bool,
    },
    /// Gradient error (x1e-3) and MAD (x1e-2) over a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time inference on a fixed random input.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        allow_multithread: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config, writing a checkpoint and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Train on this many generated fixtures instead of a dataset.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.log.jsonl` suffix.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the total step count from the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fold batch norm, calibrate and write an 8-bit model.
    Quantize {
        /// Float model or training checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        calib: Option<PathBuf>,
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OBSERVER_MOMENTUM)]
        momentum: f32,
    },
    /// Write a freshly initialized float model.
    Init {
        #[arg(long, default_value_t = 1.0)]
        width: f32,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic fixtures in the dataset layout.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-block output shapes and the parameter count.
    Trace {
        #[arg(long, default_value_t = 1.0)]
        width: f32,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

fn emit(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn breakdown_json(b: &LossBreakdown) -> serde_json::Value {
    json!({
        "alpha": b.alpha,
        "compositional": b.compositional,
        "kl": b.kl,
        "gradient": b.gradient,
        "aux": b.aux,
        "total": b.total,
    })
}

fn samples(dir: Option<&Path>, synthetic: Option<usize>, size: usize, seed: u64) -> Result<Vec<Sample>> {
    match (dir, synthetic) {
        (Some(d), _) => load_dataset(d),
        (None, Some(n)) => Ok(synth_fixtures(n, size, seed)?),
        (None, None) => Err(Error::Input("either a dataset directory or --synthetic N is required".into())),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Infer {
            model,
            image,
            out: path,
            original_size,
        } => {
            let m = LoadedModel::load(&model)?;
            let img = read_rgb(&image)?;
            let alpha = m.infer(&img, original_size)?;
            write_matte(&path, &alpha)?;
            emit(out, &json!({ "out": path, "height": alpha.shape().h, "width": alpha.shape().w }))
        }
        Command::Eval { model, data } => {
            let m = LoadedModel::load(&model)?;
            let set = load_dataset(&data)?;
            let report = evaluate(&set, |s| m.infer(&s.image, true))?;
            emit(out, &report)
        }
        Command::Bench {
            model,
            runs,
            warmup,
            threads,
            allow_multithread,
            seed,
        } => {
            let opts = BenchOptions {
                runs,
                warmup,
                threads,
                allow_multithread,
                seed,
            };
            // Validate the options before paying for the model load.
            opts.validate()?;
            let m = LoadedModel::load(&model)?;
            emit(out, &bench(&m, &opts)?)
        }
        Command::Train {
            config,
            data,
            synthetic,
            out: ckpt,
            log,
            steps,
            resume,
        } => cmd_train(&config, data.as_deref(), synthetic, &ckpt, log, steps, resume.as_deref(), out),
        Command::Quantize {
            checkpoint,
            calib,
            synthetic,
            out: path,
            momentum,
        } => {
            let file = ModelFile::load(&checkpoint)?;
            let (net, weights) = file.to_weights().map_err(|e| Error::format(&checkpoint, e))?;
            let size = net.config.input_size;
            let set = samples(calib.as_deref(), synthetic, size, 0)?;
            if set.is_empty() {
                return Err(Error::Input("calibration set is empty".into()));
            }
            let images = set.iter().map(|s| Ok(s.resized(size)?.image)).collect::<Result<Vec<Tensor>>>()?;
            let report = quantize_model(&net, &weights, &images, momentum)?;
            let qfile = ModelFile::quantized(&net, &report.model);
            qfile.save(&path)?;
            let mut diff = 0.0;
            for x in &images {
                let a = net.forward(&weights, x)?;
                let (b, _) = report.model.forward(&net, x)?;
                diff += metric_mad(&a, &b)?;
            }
            let (fb, qb) = (ModelFile::float(&net, &weights).weight_payload_bytes(), qfile.weight_payload_bytes());
            emit(
                out,
                &json!({
                    "out": path,
                    "float_weight_bytes": fb,
                    "quantized_weight_bytes": qb,
                    "compression": fb as f64 / qb as f64,
                    "calibration_images": images.len(),
                    "mean_abs_alpha_diff": diff / images.len() as f64,
                    "warnings": report.warnings,
                }),
            )
        }
        Command::Init {
            width,
            size,
            seed,
            out: path,
        } => {
            let net = MMNet::new(MMNetConfig::new(width, size))?;
            let w = init_weights(&net, seed);
            ModelFile::float(&net, &w).save(&path)?;
            emit(out, &json!({ "out": path, "params": net.param_count(), "arch_hash": format!("{:016x}", net.arch_hash()) }))
        }
        Command::Synth { n, size, seed, out: dir } => {
            let set = synth_fixtures(n, size, seed)?;
            save_dataset(&dir, &set)?;
            emit(out, &json!({ "out": dir, "samples": set.len() }))
        }
        Command::Trace { width, size } => {
            let net = MMNet::new(MMNetConfig::new(width, size))?;
            for row in net.table_trace() {
                writeln!(out, "{row}").map_err(|e| Error::io("<stdout>", e))?;
            }
            writeln!(out, "parameters: {}", net.param_count()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    data: Option<&Path>,
    synthetic: Option<usize>,
    ckpt: &Path,
    log: Option<PathBuf>,
    steps: Option<u64>,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let file = TrainFile::load(config)?;
    let mut cfg = file.train_config();
    if let Some(s) = steps {
        cfg.max_steps = s;
    }
    let net = MMNet::new(file.net_config())?;
    let mut state = match resume {
        Some(path) => {
            let (rnet, state) = ModelFile::load(path)?.to_train_state().map_err(|e| Error::format(path, e))?;
            if rnet.arch_hash() != net.arch_hash() {
                return Err(mmnet_core::Error::ArchMismatch {
                    expected: net.arch_hash(),
                    found: rnet.arch_hash(),
                }
                .into());
            }
            state
        }
        None => TrainState::new(init_weights(&net, file.model.init_seed), cfg.adam),
    };
    let set = samples(data, synthetic, net.config.input_size, cfg.seed)?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut io_error = None;
    let report = train_loop(&net, &mut state, &set, &cfg, |event, s| {
        let written = match event {
            TrainEvent::Step(l) => {
                let mut rec = breakdown_json(&l.loss);
                rec["step"] = json!(l.step);
                writeln!(log_file, "{rec}").map_err(|e| Error::io(&log_path, e))
            }
            TrainEvent::Checkpoint { .. } => ModelFile::checkpoint(&net, s).save(ckpt),
        };
        written.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            mmnet_core::Error::Contract(msg)
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let report = report?;
    ModelFile::checkpoint(&net, &state).save(ckpt)?;
    emit(
        out,
        &json!({
            "checkpoint": ckpt,
            "log": log_path,
            "samples": set.len(),
            "steps_run": report.steps.len(),
            "step": state.step(),
            "initial": breakdown_json(&report.initial),
            "final": breakdown_json(&report.last()),
        }),
    )
}
