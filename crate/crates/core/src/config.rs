//! Run configuration: one TOML file, with `key=value` overrides.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/low-rnn"     # relative paths resolve under $SPIKECAST_OUT
//!
//! [dataset]
//! source = "synth"                # "synth" or "csv"
//! preset = "low"                  # synth: "low" or "high"
//! length = 5000                   # synth: number of points
//! # seed = 7                      # synth: data seed, defaults to the run seed
//! # path = "data/series.csv"      # csv: numeric columns, one row per step
//! has_header = true               # csv
//! ratios = [0.6, 0.2, 0.2]        # train / valid / test, chronological
//! normalize = true                # z-score with training statistics
//!
//! [window]
//! lookback = 20
//! horizon = 80
//! stride = 1
//!
//! [model]
//! backbone = "rnn"                # tcn, rnn, gru, ispikformer
//! encoder = "conv"                # conv, delta, repeat
//! ts = 4
//! readout = "rate"                # rate or flatten
//! sew = "add"                     # add, and, iand
//! rnn_hidden = 128
//! [model.lif]
//! u_thr = 1.0
//! beta = 0.99
//! alpha = 2.0
//! v_reset = 0.0
//! [model.tcn]
//! channels = 16
//! blocks = 3
//! # kernel = 3                    # default: 3 below lookback 48, else 16
//! [model.ispikformer]
//! d_model = 512
//! ffn_hidden = 1024
//! blocks = 2
//!
//! [train]
//! batch_size = 128
//! lr = 1e-4
//! patience = 30
//! max_epochs = 50
//! # clip_norm = 5.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_csv, synth_generate, SeriesDataset, SynthConfig, SynthDraw, WindowSpec};
use crate::nets::ModelConfig;
use crate::train::TrainConfig;

pub const OUT_ENV: &str = "SPIKECAST_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synth,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    pub preset: String,
    pub length: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub has_header: bool,
    pub ratios: [f64; 3],
    pub normalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: Source::Synth,
            preset: "low".into(),
            length: 5000,
            seed: None,
            path: None,
            has_header: true,
            ratios: [0.6, 0.2, 0.2],
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 20,
            horizon: 80,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides (dotted keys, TOML
    /// values, bare words taken as strings), then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text)
        } else {
            RunConfig::deserialize(toml::Value::Table(value))
        }
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.dataset;
        match d.source {
            Source::Synth => {
                if d.preset != "low" && d.preset != "high" {
                    return bad(format!("dataset.preset must be \"low\" or \"high\", got {:?}", d.preset));
                }
                if d.length == 0 {
                    return bad("dataset.length must be positive".into());
                }
            }
            Source::Csv => {
                if d.path.is_none() {
                    return bad("dataset.path is required when dataset.source = \"csv\"".into());
                }
            }
        }
        crate::data::split(1000, (d.ratios[0], d.ratios[1], d.ratios[2])).map_err(|e| ConfigError::Invalid(format!("dataset.ratios: {e}")))?;
        self.window.spec().validate().map_err(|e| ConfigError::Invalid(format!("window: {e}")))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        Ok(())
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        let r = self.dataset.ratios;
        (r[0], r[1], r[2])
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        SynthConfig::preset(&self.dataset.preset, self.dataset.length, self.data_seed())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Raw series named by the dataset section, with the synthetic draw if any.
    pub fn load_dataset(&self) -> Result<(SeriesDataset, Option<SynthDraw>), crate::data::DataError> {
        match self.dataset.source {
            Source::Synth => {
                let cfg = SynthConfig::preset(&self.dataset.preset, self.dataset.length, self.data_seed())?;
                let (ds, draw) = synth_generate(&cfg)?;
                Ok((ds, Some(draw)))
            }
            Source::Csv => {
                let path = self.dataset.path.as_deref().unwrap_or(Path::new(""));
                Ok((load_csv(path, self.dataset.has_header)?, None))
            }
        }
    }

    /// `output_dir`, placed under `$SPIKECAST_OUT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Written beside every command's outputs; enough to rerun it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.to_toml(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
