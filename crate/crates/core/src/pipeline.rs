//! Data, model, training and evaluation wired together from a [`RunConfig`].

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autograd::Tensor;
use crate::config::{ConfigError, RunConfig};
use crate::data::{DataError, Part, Prepared, SeriesDataset, SynthDraw, Windows};
use crate::energy::{count_flops, energy, record_firing_rates, EnergyError, EnergyReport};
use crate::graph::{Mode, ModelError};
use crate::metrics::{MetricError, MetricReport};
use crate::nets::CheckpointError;
use crate::nets::{ForecastModel, ModelDims};
use crate::train::{train, History, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("window index {index} out of range ({len} windows in the {part} split)")]
    Index {
        index: usize,
        len: usize,
        part: &'static str,
    },
}

impl RunError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Mismatch(_) => 2,
            RunError::Train(TrainError::Config(_)) | RunError::Model(ModelError::Config(_)) => 2,
            _ => 3,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
        move |source| RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A loaded and normalized dataset plus the config that produced it.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub raw: SeriesDataset,
    pub draw: Option<SynthDraw>,
    pub prepared: Prepared,
}

/// Denormalized forecasts and targets for one split, `[M, L, C]` each.
pub struct Forecasts {
    pub preds: Tensor,
    pub truths: Tensor,
}

pub struct RunOutcome {
    pub model: ForecastModel,
    pub history: History,
    pub valid: MetricReport,
    pub test: MetricReport,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let (raw, draw) = cfg.load_dataset()?;
        let prepared = Prepared::new(&raw, cfg.ratios(), cfg.dataset.normalize)?;
        Ok(Self {
            cfg: cfg.clone(),
            raw,
            draw,
            prepared,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            lookback: self.cfg.window.lookback,
            horizon: self.cfg.window.horizon,
            channels: self.raw.channels(),
        }
    }

    pub fn windows(&self, part: Part) -> Result<Windows<'_>, RunError> {
        Ok(self.prepared.windows(part, self.cfg.window.spec())?)
    }

    pub fn build_model(&self) -> Result<ForecastModel, RunError> {
        Ok(ForecastModel::new(&self.cfg.model, self.dims(), self.cfg.seed)?)
    }

    /// Rejects a checkpoint built for other dimensions or another model.
    pub fn check_model(&self, model: &ForecastModel) -> Result<(), RunError> {
        if model.dims() != self.dims() {
            return Err(RunError::Mismatch(format!(
                "checkpoint was built for {:?}, configuration gives {:?}",
                model.dims(),
                self.dims()
            )));
        }
        if model.config().backbone != self.cfg.model.backbone || model.config().encoder != self.cfg.model.encoder {
            return Err(RunError::Mismatch(format!(
                "checkpoint holds a {}/{} model, configuration asks for {}/{}",
                model.config().backbone.name(),
                model.config().encoder.name(),
                self.cfg.model.backbone.name(),
                self.cfg.model.encoder.name()
            )));
        }
        Ok(())
    }

    pub fn train(&self, model: &mut ForecastModel) -> Result<History, RunError> {
        let tr = self.windows(Part::Train)?;
        let va = self.windows(Part::Valid)?;
        Ok(train(model, &tr, &va, &self.cfg.train)?)
    }

    pub fn forecasts(&self, model: &ForecastModel, part: Part) -> Result<Forecasts, RunError> {
        let w = self.windows(part)?;
        let idx: Vec<usize> = (0..w.len()).collect();
        let (x, y) = w.batch(&idx);
        let mut preds = model.predict(&x, self.cfg.train.eval_batch)?;
        let mut truths = y;
        self.prepared.stats.denormalize(preds.data_mut());
        self.prepared.stats.denormalize(truths.data_mut());
        Ok(Forecasts { preds, truths })
    }

    /// RSE and R² on the original scale.
    pub fn evaluate(&self, model: &ForecastModel, part: Part, per_horizon: bool) -> Result<MetricReport, RunError> {
        if part == Part::Train {
            log::warn!("evaluating on the training split; these numbers do not measure generalization");
        }
        let f = self.forecasts(model, part)?;
        Ok(MetricReport::compute(
            &f.preds,
            &f.truths,
            model.config().backbone.name(),
            part.name(),
            self.cfg.window.lookback,
            per_horizon,
        )?)
    }

    /// Firing rates measured on the test split, priced per layer.
    pub fn energy(&self, model: &ForecastModel) -> Result<EnergyReport, RunError> {
        let w = self.windows(Part::Test)?;
        let rates = record_firing_rates(model, &w, self.cfg.train.eval_batch)?;
        Ok(energy(&count_flops(model), &rates, model.config().ts)?)
    }

    /// Encoder spikes and forecast for one window of `part`.
    pub fn inspect(&self, model: &ForecastModel, part: Part, index: usize) -> Result<Inspection, RunError> {
        let w = self.windows(part)?;
        if index >= w.len() {
            return Err(RunError::Index {
                index,
                len: w.len(),
                part: part.name(),
            });
        }
        let (x, y) = w.get(index);
        let mut g = model.graph(Mode::Eval);
        let spikes = model.encoder().encode_window(&mut g, &x)?;
        let batched = x.clone().reshaped(vec![1, x.shape()[0], x.shape()[1]]).map_err(ModelError::from)?;
        let mut pred = model.predict(&batched, 1)?.into_data();
        let mut truth = y.into_data();
        let mut input = x.into_data();
        let stats = &self.prepared.stats;
        stats.denormalize(&mut pred);
        stats.denormalize(&mut truth);
        stats.denormalize(&mut input);
        Ok(Inspection {
            start: w.start(index),
            ts: spikes.shape()[0],
            lookback: self.cfg.window.lookback,
            horizon: self.cfg.window.horizon,
            channels: self.raw.channels(),
            spikes: spikes.data().to_vec(),
            input,
            pred,
            truth,
        })
    }
}

/// One window laid out for plotting.
pub struct Inspection {
    /// Row of the first lookback step inside the split.
    pub start: usize,
    pub ts: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// `[Ts, T, C]`.
    pub spikes: Vec<f32>,
    /// `[T, C]`.
    pub input: Vec<f32>,
    /// `[L, C]`.
    pub pred: Vec<f32>,
    /// `[L, C]`.
    pub truth: Vec<f32>,
}

impl Inspection {
    /// Columns `t,sub_step,channel,spike`.
    pub fn spike_rows(&self) -> Vec<Vec<String>> {
        let (t_len, c_len) = (self.lookback, self.channels);
        let mut rows = vec![vec!["t".into(), "sub_step".into(), "channel".into(), "spike".into()]];
        for t in 0..t_len {
            for k in 0..self.ts {
                for c in 0..c_len {
                    let v = self.spikes[(k * t_len + t) * c_len + c];
                    rows.push(vec![t.to_string(), k.to_string(), c.to_string(), (v as u8).to_string()]);
                }
            }
        }
        rows
    }

    /// One row per (step, sub-step) and one column per channel.
    pub fn spike_matrix_rows(&self, names: &[String]) -> Vec<Vec<String>> {
        let (t_len, c_len) = (self.lookback, self.channels);
        let mut header = vec!["t".to_string(), "sub_step".to_string()];
        header.extend(names.iter().cloned());
        let mut rows = vec![header];
        for t in 0..t_len {
            for k in 0..self.ts {
                let mut r = vec![t.to_string(), k.to_string()];
                r.extend((0..c_len).map(|c| (self.spikes[(k * t_len + t) * c_len + c] as u8).to_string()));
                rows.push(r);
            }
        }
        rows
    }

    /// Columns `channel,step,truth,prediction`; `L` rows per channel.
    pub fn prediction_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec!["channel".into(), "step".into(), "truth".into(), "prediction".into()]];
        for c in 0..self.channels {
            for l in 0..self.horizon {
                let i = l * self.channels + c;
                rows.push(vec![c.to_string(), (l + 1).to_string(), self.truth[i].to_string(), self.pred[i].to_string()]);
            }
        }
        rows
    }

    /// Columns `channel,t,value` for the lookback window.
    pub fn input_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec!["channel".into(), "t".into(), "value".into()]];
        for c in 0..self.channels {
            for t in 0..self.lookback {
                rows.push(vec![c.to_string(), t.to_string(), self.input[t * self.channels + c].to_string()]);
            }
        }
        rows
    }
}

/// Builds, trains and scores one model.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let p = Pipeline::new(cfg)?;
    let mut model = p.build_model()?;
    let history = p.train(&mut model)?;
    let valid = p.evaluate(&model, Part::Valid, false)?;
    let test = p.evaluate(&model, Part::Test, false)?;
    Ok(RunOutcome {
        model,
        history,
        valid,
        test,
    })
}
