//! Theoretical energy per sample on 45 nm hardware.
//!
//! Spiking layers cost `E_AC` per synaptic operation with
//! `SOPs = Ts * gamma * FLOPs`, where `gamma` is the firing rate of the
//! layer's input spikes and `FLOPs` counts multiply-accumulates for one
//! sample and one sub-step. Layers fed with real values (the first encoder
//! map and the decoder) cost `E_MAC` per FLOP. The reference network costs
//! `E_MAC` per FLOP everywhere. Batch norm is folded into the preceding
//! layer and adds nothing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Windows;
use crate::graph::{Graph, Mode, ModelError, Monitor};
use crate::nets::{ForecastModel, OpCount};

/// Picojoules per multiply-accumulate.
pub const E_MAC_PJ: f64 = 4.6;
/// Picojoules per accumulate.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("no firing rate recorded for spiking layer {0}")]
    MissingRate(String),
    #[error("firing rate {gamma} of layer {layer} is outside [0, 1]")]
    BadRate { layer: String, gamma: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    /// Input firing rate; `None` for layers fed with real values.
    pub gamma: Option<f64>,
    pub sops: f64,
    pub is_float_layer: bool,
    /// Energy inside the spiking network.
    pub energy_pj: f64,
    /// Energy of the same layer in the reference network.
    pub ann_energy_pj: f64,
}

impl LayerCost {
    pub fn spiking(name: &str, flops: u64, gamma: f64, ts: usize) -> Self {
        let sops = ts as f64 * gamma * flops as f64;
        Self {
            name: name.to_string(),
            flops,
            gamma: Some(gamma),
            sops,
            is_float_layer: false,
            energy_pj: E_AC_PJ * sops,
            ann_energy_pj: E_MAC_PJ * flops as f64,
        }
    }

    pub fn float(name: &str, flops: u64) -> Self {
        let e = E_MAC_PJ * flops as f64;
        Self {
            name: name.to_string(),
            flops,
            gamma: None,
            sops: 0.0,
            is_float_layer: true,
            energy_pj: e,
            ann_energy_pj: e,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub ts: usize,
    pub layers: Vec<LayerCost>,
    pub total_snn_pj: f64,
    pub total_ann_pj: f64,
    /// `100 * (1 - E_snn / E_ann)`.
    pub reduction_pct: f64,
}

impl EnergyReport {
    pub fn from_layers(layers: Vec<LayerCost>, ts: usize) -> Self {
        let total_snn_pj = layers.iter().map(|l| l.energy_pj).sum();
        let total_ann_pj: f64 = layers.iter().map(|l| l.ann_energy_pj).sum();
        let reduction_pct = if total_ann_pj > 0.0 {
            100.0 * (1.0 - total_snn_pj / total_ann_pj)
        } else {
            0.0
        };
        Self {
            ts,
            layers,
            total_snn_pj,
            total_ann_pj,
            reduction_pct,
        }
    }

    /// Columns `layer,flops,gamma,sops,pj,ann_pj`, then a total row.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "layer,flops,gamma,sops,pj,ann_pj")?;
        for l in &self.layers {
            let gamma = l.gamma.map(|g| g.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{},{},{}", l.name, l.flops, gamma, l.sops, l.energy_pj, l.ann_energy_pj)?;
        }
        writeln!(f, "total,,,,{},{}", self.total_snn_pj, self.total_ann_pj)?;
        f.flush()
    }

    pub fn table(&self) -> String {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<w$} {:>14} {:>8} {:>16} {:>14}\n",
            "layer", "FLOPs", "gamma", "SOPs", "pJ"
        );
        for l in &self.layers {
            let g = l.gamma.map(|g| format!("{g:.4}")).unwrap_or_else(|| "float".into());
            s += &format!("{:<w$} {:>14} {:>8} {:>16.1} {:>14.1}\n", l.name, l.flops, g, l.sops, l.energy_pj);
        }
        s += &format!(
            "spiking total {:.4} mJ, reference total {:.4} mJ, reduction {:.2}% (Ts = {})\n",
            self.total_snn_pj * 1e-9,
            self.total_ann_pj * 1e-9,
            self.reduction_pct,
            self.ts
        );
        s
    }
}

/// Analytic per-layer counts for one sample and one sub-step.
pub fn count_flops(model: &ForecastModel) -> Vec<OpCount> {
    model.op_counts()
}

/// Accumulates the fraction of ones entering each synaptic layer.
#[derive(Clone, Debug, Default)]
pub struct RateRecorder {
    counts: BTreeMap<String, (f64, u64)>,
}

impl Monitor for RateRecorder {
    fn synaptic_input(&mut self, layer: &str, values: &[f32]) {
        let e = self.counts.entry(layer.to_string()).or_insert((0.0, 0));
        e.0 += values.iter().map(|&v| v as f64).sum::<f64>();
        e.1 += values.len() as u64;
    }
}

impl RateRecorder {
    pub fn rates(&self) -> BTreeMap<String, f64> {
        self.counts
            .iter()
            .map(|(k, &(ones, n))| (k.clone(), if n == 0 { 0.0 } else { ones / n as f64 }))
            .collect()
    }
}

/// Runs inference over every window and returns `gamma` per layer.
pub fn record_firing_rates(
    model: &ForecastModel,
    windows: &Windows,
    chunk: usize,
) -> Result<BTreeMap<String, f64>, ModelError> {
    let mut rec = RateRecorder::default();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, _) = windows.batch(part);
        let mut g = Graph::with_monitor(model.params(), Mode::Eval, &mut rec);
        model.forward(&mut g, &x)?;
    }
    Ok(rec.rates())
}

/// Prices every counted layer; spiking layers need a recorded rate.
pub fn energy(counts: &[OpCount], rates: &BTreeMap<String, f64>, ts: usize) -> Result<EnergyReport, EnergyError> {
    let mut layers = Vec::with_capacity(counts.len());
    for c in counts {
        if c.float_input {
            layers.push(LayerCost::float(&c.name, c.flops));
            continue;
        }
        let gamma = *rates.get(&c.name).ok_or_else(|| EnergyError::MissingRate(c.name.clone()))?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(EnergyError::BadRate {
                layer: c.name.clone(),
                gamma,
            });
        }
        layers.push(LayerCost::spiking(&c.name, c.flops, gamma, ts));
    }
    Ok(EnergyReport::from_layers(layers, ts))
}
