//! Scripted experiments: hyper-parameter sweeps, the encoder comparison
//! grid and prediction slices on the synthetic presets.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, Manifest, RunConfig};
use crate::data::{write_rows, Part};
use crate::encoders::EncoderKind;
use crate::nets::BackboneKind;
use crate::pipeline::{train_and_evaluate, Pipeline, RunError};

/// Validation R² below this after training marks a run as not converged.
pub const CONVERGENCE_R2: f64 = 0.05;

pub const TS_VALUES: [usize; 4] = [4, 8, 12, 16];
pub const BETA_VALUES: [f64; 5] = [0.99, 0.95, 0.90, 0.85, 0.80];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Ts,
    Beta,
    Encoder,
    Backbone,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Ts => "ts",
            SweepAxis::Beta => "beta",
            SweepAxis::Encoder => "encoder",
            SweepAxis::Backbone => "backbone",
        }
    }

    /// Config key the axis overrides.
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Ts => "model.ts",
            SweepAxis::Beta => "model.lif.beta",
            SweepAxis::Encoder => "model.encoder",
            SweepAxis::Backbone => "model.backbone",
        }
    }

    /// The grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        match self {
            SweepAxis::Ts => TS_VALUES.iter().map(|v| v.to_string()).collect(),
            SweepAxis::Beta => BETA_VALUES.iter().map(|v| v.to_string()).collect(),
            SweepAxis::Encoder => EncoderKind::ALL.iter().map(|e| e.name().to_string()).collect(),
            SweepAxis::Backbone => ["tcn", "rnn", "gru", "ispikformer"].map(String::from).to_vec(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ts" => Ok(SweepAxis::Ts),
            "beta" => Ok(SweepAxis::Beta),
            "encoder" => Ok(SweepAxis::Encoder),
            "backbone" => Ok(SweepAxis::Backbone),
            _ => Err(format!("unknown sweep axis '{s}' (expected ts, beta, encoder or backbone)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Every run config of the sweep, value-major, checked before any training.
    pub fn configs(&self) -> Result<Vec<(String, u64, RunConfig)>, ConfigError> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(ConfigError::Invalid("a sweep needs at least one value and one seed".into()));
        }
        let base = self.base.to_toml();
        let mut out = Vec::new();
        for v in &self.values {
            for &seed in &self.seeds {
                let sets = vec![format!("{}={v}", self.axis.key()), format!("seed={seed}")];
                out.push((v.clone(), seed, RunConfig::from_toml_with(&base, &sets)?));
            }
        }
        Ok(out)
    }
}

/// Outcome of one train+eval inside an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub value: String,
    pub seed: u64,
    pub valid_r2: f64,
    pub test_r2: f64,
    pub test_rse: f64,
    pub epochs: usize,
    /// Error message when the run failed; metrics are NaN then.
    pub error: Option<String>,
}

impl RunRecord {
    fn from_run(value: &str, seed: u64, cfg: &RunConfig) -> Self {
        match train_and_evaluate(cfg) {
            Ok(o) => Self {
                value: value.to_string(),
                seed,
                valid_r2: o.valid.r2,
                test_r2: o.test.r2,
                test_rse: o.test.rse,
                epochs: o.history.records.len(),
                error: None,
            },
            Err(e) => {
                log::error!("run {value} seed {seed} failed: {e}");
                Self {
                    value: value.to_string(),
                    seed,
                    valid_r2: f64::NAN,
                    test_r2: f64::NAN,
                    test_rse: f64::NAN,
                    epochs: 0,
                    error: Some(e.to_string()),
                }
            }
        }
    }

    pub fn converged(&self) -> bool {
        self.error.is_none() && self.valid_r2 >= CONVERGENCE_R2
    }
}

/// Mean and population std over the successful runs of one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_r2: f64,
    pub std_r2: f64,
    pub mean_rse: f64,
    pub std_rse: f64,
    pub mean_valid_r2: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn summarize(value: &str, runs: &[&RunRecord]) -> Summary {
    let ok: Vec<&&RunRecord> = runs.iter().filter(|r| r.error.is_none()).collect();
    let (mean_r2, std_r2) = mean_std(&ok.iter().map(|r| r.test_r2).collect::<Vec<_>>());
    let (mean_rse, std_rse) = mean_std(&ok.iter().map(|r| r.test_rse).collect::<Vec<_>>());
    let (mean_valid_r2, _) = mean_std(&ok.iter().map(|r| r.valid_r2).collect::<Vec<_>>());
    Summary {
        value: value.to_string(),
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        mean_r2,
        std_r2,
        mean_rse,
        std_rse,
        mean_valid_r2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub records: Vec<RunRecord>,
    pub summary: Vec<Summary>,
}

impl SweepResult {
    /// `runs.csv` (one row per run) and `summary.csv` (one row per value).
    pub fn write(&self, dir: &Path) -> Result<Vec<String>, RunError> {
        let axis = self.axis.name();
        let mut runs = vec![vec![
            axis.to_string(),
            "seed".into(),
            "valid_r2".into(),
            "test_r2".into(),
            "test_rse".into(),
            "epochs".into(),
            "status".into(),
        ]];
        for r in &self.records {
            runs.push(vec![
                r.value.clone(),
                r.seed.to_string(),
                r.valid_r2.to_string(),
                r.test_r2.to_string(),
                r.test_rse.to_string(),
                r.epochs.to_string(),
                status(r),
            ]);
        }
        write_rows(&dir.join("runs.csv"), &runs)?;
        let mut header = vec![axis.to_string()];
        header.extend(["runs", "failed", "mean_r2", "std_r2", "mean_rse", "std_rse"].map(String::from));
        let mut sum = vec![header];
        for s in &self.summary {
            sum.push(vec![
                s.value.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                s.mean_r2.to_string(),
                s.std_r2.to_string(),
                s.mean_rse.to_string(),
                s.std_rse.to_string(),
            ]);
        }
        write_rows(&dir.join("summary.csv"), &sum)?;
        Ok(vec!["runs.csv".into(), "summary.csv".into()])
    }
}

fn status(r: &RunRecord) -> String {
    match &r.error {
        Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
        None if r.converged() => "ok".into(),
        None => "not_converged".into(),
    }
}

/// One train+eval per (value, seed). Failed runs are recorded and the
/// sweep carries on.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, RunError> {
    let configs = spec.configs()?;
    let mut records = Vec::with_capacity(configs.len());
    for (value, seed, cfg) in &configs {
        log::info!("{} = {value}, seed {seed}", spec.axis.name());
        records.push(RunRecord::from_run(value, *seed, cfg));
    }
    let summary = spec
        .values
        .iter()
        .map(|v| summarize(v, &records.iter().filter(|r| &r.value == v).collect::<Vec<_>>()))
        .collect();
    Ok(SweepResult {
        axis: spec.axis,
        records,
        summary,
    })
}

pub const COMPARISON_BACKBONES: [BackboneKind; 3] = [BackboneKind::Tcn, BackboneKind::Rnn, BackboneKind::Ispikformer];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCell {
    pub encoder: EncoderKind,
    pub backbone: BackboneKind,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
    /// Mean validation R² of the cell fell below [`CONVERGENCE_R2`].
    pub not_converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderComparison {
    pub cells: Vec<EncoderCell>,
}

impl EncoderComparison {
    pub fn cell(&self, encoder: EncoderKind, backbone: BackboneKind) -> Option<&EncoderCell> {
        self.cells.iter().find(|c| c.encoder == encoder && c.backbone == backbone)
    }

    /// Backbones where mean test R² is ordered conv ≥ delta ≥ repeat.
    pub fn ordered_backbones(&self) -> Vec<BackboneKind> {
        let mut out = Vec::new();
        let mut backbones: Vec<BackboneKind> = self.cells.iter().map(|c| c.backbone).collect();
        backbones.dedup();
        for b in backbones {
            let r = |e| self.cell(e, b).map(|c| c.summary.mean_r2).unwrap_or(f64::NAN);
            let (conv, delta, rep) = (r(EncoderKind::Conv), r(EncoderKind::Delta), r(EncoderKind::Repeat));
            if conv >= delta && delta >= rep {
                out.push(b);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RunError> {
        let mut rows = vec![[
            "encoder",
            "backbone",
            "runs",
            "failed",
            "mean_r2",
            "std_r2",
            "mean_rse",
            "std_rse",
            "mean_valid_r2",
            "not_converged",
        ]
        .map(String::from)
        .to_vec()];
        for c in &self.cells {
            let s = &c.summary;
            rows.push(vec![
                c.encoder.name().into(),
                c.backbone.name().into(),
                s.runs.to_string(),
                s.failed.to_string(),
                s.mean_r2.to_string(),
                s.std_r2.to_string(),
                s.mean_rse.to_string(),
                s.std_rse.to_string(),
                s.mean_valid_r2.to_string(),
                c.not_converged.to_string(),
            ]);
        }
        Ok(write_rows(path, &rows)?)
    }

    /// Encoders as rows, backbones as columns; `*` marks non-convergence.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8}", "encoder");
        for b in COMPARISON_BACKBONES {
            s += &format!(" {:>16}", b.name());
        }
        s.push('\n');
        for e in [EncoderKind::Conv, EncoderKind::Delta, EncoderKind::Repeat] {
            s += &format!("{:<8}", e.name());
            for b in COMPARISON_BACKBONES {
                s += &match self.cell(e, b) {
                    Some(c) => format!(
                        " {:>15.3}{}",
                        c.summary.mean_r2,
                        if c.not_converged { "*" } else { " " }
                    ),
                    None => format!(" {:>16}", "-"),
                };
            }
            s.push('\n');
        }
        s += &format!("* validation R² below {CONVERGENCE_R2} after training\n");
        s
    }
}

/// Trains every encoder with every backbone of `backbones` over `seeds`.
pub fn run_encoder_comparison(
    base: &RunConfig,
    backbones: &[BackboneKind],
    seeds: &[u64],
) -> Result<EncoderComparison, RunError> {
    let mut cells = Vec::new();
    for &backbone in backbones {
        for encoder in [EncoderKind::Conv, EncoderKind::Delta, EncoderKind::Repeat] {
            let mut cfg = base.clone();
            cfg.model.backbone = backbone;
            let spec = SweepSpec {
                axis: SweepAxis::Encoder,
                values: vec![encoder.name().to_string()],
                base: cfg,
                seeds: seeds.to_vec(),
            };
            let res = run_sweep(&spec)?;
            let summary = res.summary.into_iter().next().expect("one value");
            cells.push(EncoderCell {
                encoder,
                backbone,
                not_converged: !(summary.mean_valid_r2 >= CONVERGENCE_R2),
                runs: res.records,
                summary,
            });
        }
    }
    Ok(EncoderComparison { cells })
}

/// One prediction slice of the temporal analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub preset: String,
    pub backbone: BackboneKind,
    pub test_r2: f64,
    pub test_rse: f64,
    pub window: usize,
    pub input: Vec<f32>,
    pub truth: Vec<f32>,
    pub pred: Vec<f32>,
}

pub const SLICE_LOOKBACK: usize = 20;
pub const SLICE_HORIZON: usize = 80;

/// Trains each backbone on both presets at `T = 20, L = 80` and keeps the
/// forecast for window `window` of the test split.
pub fn run_temporal_analysis(base: &RunConfig, backbones: &[BackboneKind], window: usize) -> Result<Vec<Slice>, RunError> {
    let mut out = Vec::new();
    for preset in ["low", "high"] {
        for &backbone in backbones {
            let mut cfg = base.clone();
            cfg.dataset.source = crate::config::Source::Synth;
            cfg.dataset.preset = preset.to_string();
            cfg.window.lookback = SLICE_LOOKBACK;
            cfg.window.horizon = SLICE_HORIZON;
            cfg.model.backbone = backbone;
            cfg.validate()?;
            let p = Pipeline::new(&cfg)?;
            let mut model = p.build_model()?;
            p.train(&mut model)?;
            let test = p.evaluate(&model, Part::Test, false)?;
            let ins = p.inspect(&model, Part::Test, window)?;
            out.push(Slice {
                preset: preset.to_string(),
                backbone,
                test_r2: test.r2,
                test_rse: test.rse,
                window,
                input: ins.input,
                truth: ins.truth,
                pred: ins.pred,
            });
        }
    }
    Ok(out)
}

/// `slices.csv` with columns `preset,backbone,t,truth,prediction` (the
/// lookback has negative `t` and an empty prediction) and `slices_r2.csv`.
pub fn write_slices(slices: &[Slice], dir: &Path) -> Result<Vec<String>, RunError> {
    let path = dir.join("slices.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(RunError::io(&path))?);
    let mut body = String::from("preset,backbone,t,truth,prediction\n");
    for s in slices {
        let t = s.input.len() as i64;
        for (i, v) in s.input.iter().enumerate() {
            body += &format!("{},{},{},{},\n", s.preset, s.backbone.name(), i as i64 - t, v);
        }
        for (i, (y, p)) in s.truth.iter().zip(&s.pred).enumerate() {
            body += &format!("{},{},{},{},{}\n", s.preset, s.backbone.name(), i, y, p);
        }
    }
    f.write_all(body.as_bytes()).and_then(|_| f.flush()).map_err(RunError::io(&path))?;
    let mut rows = vec![["preset", "backbone", "test_r2", "test_rse"].map(String::from).to_vec()];
    for s in slices {
        rows.push(vec![s.preset.clone(), s.backbone.name().into(), s.test_r2.to_string(), s.test_rse.to_string()]);
    }
    write_rows(&dir.join("slices_r2.csv"), &rows)?;
    Ok(vec!["slices.csv".into(), "slices_r2.csv".into()])
}

/// Writes the manifest of an experiment next to its outputs.
pub fn write_manifest(dir: &Path, command: &str, base: &RunConfig, outputs: Vec<String>) -> Result<(), RunError> {
    Manifest::new(command, base, outputs).write(dir).map_err(RunError::io(dir))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_toml(
            r#"
[dataset]
length = 260
[window]
lookback = 8
horizon = 4
stride = 4
[model]
backbone = "rnn"
rnn_hidden = 8
[model.ispikformer]
d_model = 16
ffn_hidden = 16
[train]
batch_size = 8
max_epochs = 2
lr = 1e-3
"#,
        )
        .unwrap()
    }

    #[test]
    fn axis_defaults_cover_the_grids() {
        assert_eq!(SweepAxis::Ts.default_values(), ["4", "8", "12", "16"]);
        assert_eq!(SweepAxis::Beta.default_values(), ["0.99", "0.95", "0.9", "0.85", "0.8"]);
        assert_eq!(SweepAxis::Encoder.default_values().len(), 3);
        assert_eq!("beta".parse::<SweepAxis>().unwrap(), SweepAxis::Beta);
        assert!("gamma".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn configs_apply_axis_and_seed() {
        let spec = SweepSpec {
            axis: SweepAxis::Beta,
            values: vec!["0.9".into(), "0.8".into()],
            base: tiny(),
            seeds: vec![0, 5],
        };
        let c = spec.configs().unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[1].2.model.lif.beta, 0.9);
        assert_eq!((c[1].2.seed, c[1].2.train.seed), (5, 5));
        assert_eq!(c[3].2.model.lif.beta, 0.8);
        let empty = SweepSpec { values: vec![], ..spec.clone() };
        assert!(empty.configs().is_err());
        let bad = SweepSpec {
            axis: SweepAxis::Ts,
            values: vec!["0".into()],
            ..spec
        };
        assert!(bad.configs().is_err());
    }

    #[test]
    fn single_value_sweep_equals_plain_run() {
        let base = tiny();
        let spec = SweepSpec {
            axis: SweepAxis::Ts,
            values: vec!["4".into()],
            base: base.clone(),
            seeds: vec![0],
        };
        let res = run_sweep(&spec).unwrap();
        let plain = train_and_evaluate(&base).unwrap();
        assert_eq!(res.records[0].test_r2, plain.test.r2);
        assert_eq!(res.records[0].test_rse, plain.test.rse);
        assert_eq!(res.summary[0].mean_r2, plain.test.r2);
        assert_eq!(res.summary[0].std_r2, 0.0);
    }

    #[test]
    fn failed_runs_are_recorded() {
        let mut base = tiny();
        base.dataset.length = 40;
        let spec = SweepSpec {
            axis: SweepAxis::Ts,
            values: vec!["4".into(), "8".into()],
            base,
            seeds: vec![0],
        };
        let res = run_sweep(&spec).unwrap();
        assert_eq!(res.records.len(), 2);
        assert!(res.records.iter().all(|r| r.error.is_some() && !r.converged()));
        assert_eq!(res.summary[0].failed, 1);
        let dir = tempfile::tempdir().unwrap();
        res.write(dir.path()).unwrap();
        let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert!(runs.lines().nth(1).unwrap().contains("failed"));
    }

    #[test]
    fn summary_statistics() {
        let r = |v: f64| RunRecord {
            value: "a".into(),
            seed: 0,
            valid_r2: v,
            test_r2: v,
            test_rse: 1.0 - v,
            epochs: 1,
            error: None,
        };
        let runs = [r(0.2), r(0.4)];
        let s = summarize("a", &runs.iter().collect::<Vec<_>>());
        assert!((s.mean_r2 - 0.3).abs() < 1e-12 && (s.std_r2 - 0.1).abs() < 1e-12);
        assert!(r(0.04).valid_r2 < CONVERGENCE_R2 && !r(0.04).converged() && r(0.05).converged());
    }

    #[test]
    fn comparison_grid_and_ordering() {
        let grid = run_encoder_comparison(&tiny(), &COMPARISON_BACKBONES, &[0]);
        let grid = grid.unwrap();
        assert_eq!(grid.cells.len(), 9);
        for c in &grid.cells {
            assert_eq!(c.not_converged, !(c.summary.mean_valid_r2 >= CONVERGENCE_R2));
        }
        let t = grid.table();
        assert_eq!(t.lines().count(), 5);
        let mut fake = grid.clone();
        for c in &mut fake.cells {
            c.summary.mean_r2 = match c.encoder {
                EncoderKind::Conv => 0.9,
                EncoderKind::Delta => 0.5,
                EncoderKind::Repeat => 0.1,
            };
        }
        assert_eq!(fake.ordered_backbones().len(), 3);
        fake.cells[0].summary.mean_r2 = 0.0;
        assert_eq!(fake.ordered_backbones().len(), 2);
    }

    #[test]
    fn temporal_analysis_emits_six_slices() {
        let mut base = tiny();
        base.dataset.length = 1000;
        base.train.max_epochs = 1;
        let slices = run_temporal_analysis(&base, &COMPARISON_BACKBONES, 0).unwrap();
        assert_eq!(slices.len(), 6);
        for s in &slices {
            assert_eq!((s.truth.len(), s.pred.len(), s.input.len()), (SLICE_HORIZON, SLICE_HORIZON, SLICE_LOOKBACK));
        }
        let dir = tempfile::tempdir().unwrap();
        write_slices(&slices, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("slices.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 6 * 100);
    }
}
