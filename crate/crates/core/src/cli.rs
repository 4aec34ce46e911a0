//! Command-line front end. Every command reads a run config (file plus
//! `--set key=value` overrides), writes its outputs and a `manifest.json`
//! into the output directory, and is deterministic for a fixed seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autograd::Tensor;
use crate::config::{resolve_output, ConfigError, Manifest, RunConfig};
use crate::data::{load_csv, synth_generate, write_rows, Part};
use crate::experiments::{
    run_encoder_comparison, run_sweep, run_temporal_analysis, write_manifest, write_slices, SweepAxis, SweepSpec,
    COMPARISON_BACKBONES, DEFAULT_SEEDS,
};
use crate::nets::{load_checkpoint, save_checkpoint, BackboneKind, ForecastModel};
use crate::pipeline::{Pipeline, RunError};

#[derive(Debug, Parser)]
#[command(name = "spikecast", version, about = "Spiking neural networks for time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.backbone=rnn`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory, replacing `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct CheckpointArg {
    /// Checkpoint file; defaults to `checkpoint.json` in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic series as CSV with a JSON sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
        /// low or high; overrides `dataset.preset`.
        #[arg(long)]
        preset: Option<String>,
        /// Number of points; overrides `dataset.length`.
        #[arg(long)]
        length: Option<usize>,
        /// Generator seed; overrides `dataset.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and save checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// RSE and R² of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report every horizon step.
        #[arg(long)]
        per_horizon: bool,
    },
    /// Forecast the steps after the last lookback window of a series.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// CSV to forecast from; defaults to the configured dataset.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-layer energy estimate with firing rates from the test split.
    Energy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Dump encoder spikes and the forecast for one window.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Index of the window within the split.
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Encoder spikes for one window of an untrained model.
    EncodeInspect {
        #[command(flatten)]
        common: Common,
        /// Index of the window within the split.
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate across values of one hyper-parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// ts, beta, encoder or backbone.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds; 0,1,2 when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Every encoder against every backbone.
    CompareEncoders {
        #[command(flatten)]
        common: Common,
        /// Comma-separated backbones; tcn, rnn and ispikformer when omitted.
        #[arg(long, value_delimiter = ',')]
        backbones: Vec<String>,
        /// Comma-separated seeds; 0,1,2 when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Prediction slices at T = 20, L = 80 on both synthetic presets.
    Temporal {
        #[command(flatten)]
        common: Common,
        /// Comma-separated backbones; tcn, rnn and ispikformer when omitted.
        #[arg(long, value_delimiter = ',')]
        backbones: Vec<String>,
        /// Index of the test window to slice.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<(RunConfig, PathBuf), RunError> {
    let mut sets = common.sets.clone();
    sets.extend_from_slice(extra);
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p, &sets)?,
        None => RunConfig::from_toml_with("", &sets)?,
    };
    let out = match &common.out {
        Some(o) => resolve_output(o),
        None => cfg.resolved_output_dir(),
    };
    std::fs::create_dir_all(&out).map_err(RunError::io(&out))?;
    Ok((cfg, out))
}

fn parse_part(s: &str) -> Result<Part, RunError> {
    match s {
        "train" => Ok(Part::Train),
        "valid" => Ok(Part::Valid),
        "test" => Ok(Part::Test),
        _ => Err(ConfigError::Invalid(format!("split must be train, valid or test, got {s:?}")).into()),
    }
}

fn parse_backbones(v: &[String]) -> Result<Vec<BackboneKind>, RunError> {
    if v.is_empty() {
        return Ok(COMPARISON_BACKBONES.to_vec());
    }
    v.iter()
        .map(|s| s.parse::<BackboneKind>().map_err(|e| ConfigError::Invalid(e.to_string()).into()))
        .collect()
}

fn seeds_or_default(v: &[u64]) -> Vec<u64> {
    if v.is_empty() {
        DEFAULT_SEEDS.to_vec()
    } else {
        v.to_vec()
    }
}

fn open_checkpoint(ckpt: &CheckpointArg, out: &Path, p: &Pipeline) -> Result<ForecastModel, RunError> {
    let path = ckpt.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    let model = load_checkpoint(&path)?;
    p.check_model(&model)?;
    Ok(model)
}

fn manifest(out: &Path, command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<(), RunError> {
    Manifest::new(command, cfg, outputs.iter().map(|s| s.to_string()).collect())
        .write(out)
        .map_err(RunError::io(out))?;
    Ok(())
}

/// Runs one parsed command; the error carries the exit code.
pub fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Synth {
            common,
            preset,
            length,
            seed,
        } => {
            let mut extra = vec!["dataset.source=\"synth\"".to_string()];
            if let Some(p) = preset {
                extra.push(format!("dataset.preset={p:?}"));
            }
            if let Some(l) = length {
                extra.push(format!("dataset.length={l}"));
            }
            if let Some(s) = seed {
                extra.push(format!("dataset.seed={s}"));
            }
            let (cfg, out) = load_config(&common, &extra)?;
            let sc = cfg.synth_config()?;
            let (ds, draw) = synth_generate(&sc)?;
            ds.write_csv(&out.join("series.csv"))?;
            let sidecar = serde_json::json!({ "config": sc, "draw": draw, "seed": sc.seed });
            let path = out.join("series.json");
            std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("json") + "\n")
                .map_err(RunError::io(&path))?;
            manifest(&out, "synth", &cfg, &["series.csv", "series.json"])?;
            println!("wrote {} rows to {}", ds.rows(), out.join("series.csv").display());
        }
        Command::Train { common } => {
            let (cfg, out) = load_config(&common, &[])?;
            let p = Pipeline::new(&cfg)?;
            let mut model = p.build_model()?;
            let history = p.train(&mut model)?;
            history.write_csv(&out.join("history.csv")).map_err(RunError::io(&out))?;
            save_checkpoint(&model, &out.join("checkpoint.json"))?;
            let valid = p.evaluate(&model, Part::Valid, false)?;
            valid.write_csv(&out.join("valid_metrics.csv")).map_err(RunError::io(&out))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(RunError::io(&out))?;
            manifest(&out, "train", &cfg, &["checkpoint.json", "history.csv", "valid_metrics.csv", "config.toml"])?;
            println!(
                "trained {} epochs (best {}, valid loss {:.6}); valid RSE {:.4} R2 {:.4}",
                history.records.len(),
                history.best_epoch,
                history.best_valid_loss,
                valid.rse,
                valid.r2
            );
        }
        Command::Eval {
            common,
            ckpt,
            split,
            per_horizon,
        } => {
            let (cfg, out) = load_config(&common, &[])?;
            let part = parse_part(&split)?;
            let p = Pipeline::new(&cfg)?;
            let model = open_checkpoint(&ckpt, &out, &p)?;
            let report = p.evaluate(&model, part, per_horizon)?;
            let name = format!("{}_metrics.csv", part.name());
            report.write_csv(&out.join(&name)).map_err(RunError::io(&out))?;
            manifest(&out, "eval", &cfg, &[&name])?;
            println!(
                "{} {} split: M = {}, T = {}, L = {}, RSE {:.4}, R2 {:.4}",
                report.backbone, report.split, report.m, report.lookback, report.horizon, report.rse, report.r2
            );
        }
        Command::Forecast { common, ckpt, input } => {
            let (cfg, out) = load_config(&common, &[])?;
            let p = Pipeline::new(&cfg)?;
            let model = open_checkpoint(&ckpt, &out, &p)?;
            let series = match &input {
                Some(path) => load_csv(path, cfg.dataset.has_header)?,
                None => p.raw.clone(),
            };
            let (t, c) = (cfg.window.lookback, p.raw.channels());
            if series.channels() != c || series.rows() < t {
                return Err(RunError::Mismatch(format!(
                    "forecast input needs at least {t} rows of {c} channels, got {} rows of {}",
                    series.rows(),
                    series.channels()
                )));
            }
            let tail = p.prepared.stats.normalize(&series).values()[(series.rows() - t) * c..].to_vec();
            let x = Tensor::new(vec![1, t, c], tail).map_err(crate::graph::ModelError::from)?;
            let mut y = model.predict(&x, 1)?.into_data();
            p.prepared.stats.denormalize(&mut y);
            let mut rows = vec![std::iter::once("step".to_string()).chain(series.names().iter().cloned()).collect()];
            for l in 0..cfg.window.horizon {
                let mut r = vec![(l + 1).to_string()];
                r.extend(y[l * c..(l + 1) * c].iter().map(|v| v.to_string()));
                rows.push(r);
            }
            write_rows(&out.join("forecast.csv"), &rows)?;
            manifest(&out, "forecast", &cfg, &["forecast.csv"])?;
            println!("wrote {} forecast steps to {}", cfg.window.horizon, out.join("forecast.csv").display());
        }
        Command::Energy { common, ckpt } => {
            let (cfg, out) = load_config(&common, &[])?;
            let p = Pipeline::new(&cfg)?;
            let model = open_checkpoint(&ckpt, &out, &p)?;
            let report = p.energy(&model)?;
            for l in &report.layers {
                if let Some(g) = l.gamma {
                    log::info!("firing rate into {}: {g:.4}", l.name);
                }
            }
            report.write_csv(&out.join("energy.csv")).map_err(RunError::io(&out))?;
            manifest(&out, "energy", &cfg, &["energy.csv"])?;
            print!("{}", report.table());
        }
        Command::Inspect {
            common,
            ckpt,
            window,
            split,
        } => {
            let (cfg, out) = load_config(&common, &[])?;
            let p = Pipeline::new(&cfg)?;
            let model = open_checkpoint(&ckpt, &out, &p)?;
            let ins = p.inspect(&model, parse_part(&split)?, window)?;
            write_rows(&out.join("spikes.csv"), &ins.spike_rows())?;
            write_rows(&out.join("prediction.csv"), &ins.prediction_rows())?;
            write_rows(&out.join("input.csv"), &ins.input_rows())?;
            manifest(&out, "inspect", &cfg, &["spikes.csv", "prediction.csv", "input.csv"])?;
            println!("window {window} starts at split row {}", ins.start);
        }
        Command::EncodeInspect { common, window, split } => {
            let (cfg, out) = load_config(&common, &[])?;
            let p = Pipeline::new(&cfg)?;
            let model = p.build_model()?;
            let ins = p.inspect(&model, parse_part(&split)?, window)?;
            write_rows(&out.join("encoding.csv"), &ins.spike_matrix_rows(p.raw.names()))?;
            write_rows(&out.join("input.csv"), &ins.input_rows())?;
            manifest(&out, "encode-inspect", &cfg, &["encoding.csv", "input.csv"])?;
            let rate = ins.spikes.iter().map(|&v| v as f64).sum::<f64>() / ins.spikes.len().max(1) as f64;
            println!("{} encoder, firing rate {rate:.4}", cfg.model.encoder.name());
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let (cfg, out) = load_config(&common, &[])?;
            let axis: SweepAxis = axis.parse().map_err(ConfigError::Invalid)?;
            let spec = SweepSpec {
                axis,
                values: if values.is_empty() { axis.default_values() } else { values },
                base: cfg.clone(),
                seeds: seeds_or_default(&seeds),
            };
            let res = run_sweep(&spec)?;
            let outputs = res.write(&out)?;
            write_manifest(&out, &format!("sweep {}", axis.name()), &cfg, outputs)?;
            for s in &res.summary {
                println!(
                    "{} = {}: R2 {:.4} ± {:.4}, RSE {:.4} ± {:.4} ({} failed)",
                    axis.name(),
                    s.value,
                    s.mean_r2,
                    s.std_r2,
                    s.mean_rse,
                    s.std_rse,
                    s.failed
                );
            }
        }
        Command::CompareEncoders {
            common,
            backbones,
            seeds,
        } => {
            let (cfg, out) = load_config(&common, &[])?;
            let grid = run_encoder_comparison(&cfg, &parse_backbones(&backbones)?, &seeds_or_default(&seeds))?;
            grid.write_csv(&out.join("encoders.csv"))?;
            write_manifest(&out, "compare-encoders", &cfg, vec!["encoders.csv".into()])?;
            print!("{}", grid.table());
        }
        Command::Temporal {
            common,
            backbones,
            window,
        } => {
            let (cfg, out) = load_config(&common, &[])?;
            let slices = run_temporal_analysis(&cfg, &parse_backbones(&backbones)?, window)?;
            let outputs = write_slices(&slices, &out)?;
            write_manifest(&out, "temporal", &cfg, outputs)?;
            for s in &slices {
                println!("{} {}: test R2 {:.4}", s.preset, s.backbone.name(), s.test_r2);
            }
        }
    }
    Ok(())
}
