//! Spiking backbones, residual combines, the readout head, and the
//! end-to-end [`ForecastModel`].

mod checkpoint;
mod ispikformer;
mod rnn;
mod tcn;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use ispikformer::ISpikformer;
pub use rnn::{SpikeGru, SpikeRnn};
pub use tcn::SpikeTcn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tensor, Var};
use crate::encoders::{EncoderKind, Encoder, DEFAULT_ENCODER_KERNEL};
use crate::graph::{Graph, Mode, ModelError};
use crate::layers::{check_binary, Linear};
use crate::lif::LifConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Tcn,
    Rnn,
    Gru,
    Ispikformer,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Tcn => "tcn",
            BackboneKind::Rnn => "rnn",
            BackboneKind::Gru => "gru",
            BackboneKind::Ispikformer => "ispikformer",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tcn" => Ok(Self::Tcn),
            "rnn" => Ok(Self::Rnn),
            "gru" => Ok(Self::Gru),
            "ispikformer" => Ok(Self::Ispikformer),
            _ => Err(format!("unknown backbone '{s}' (expected tcn, rnn, gru or ispikformer)")),
        }
    }
}

/// Spike-element-wise residual combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SewMode {
    Add,
    And,
    Iand,
}

/// How the `Ts` axis of the final spikes reaches the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Mean over sub-steps.
    Rate,
    /// Sub-steps concatenated into the feature axis.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    /// `None` picks 3 for lookbacks below 48 and 16 otherwise.
    pub kernel: Option<usize>,
    pub channels: usize,
    pub blocks: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            kernel: None,
            channels: 16,
            blocks: 3,
        }
    }
}

impl TcnConfig {
    pub fn kernel_for(&self, lookback: usize) -> usize {
        self.kernel.unwrap_or(if lookback < 48 { 3 } else { 16 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikformerConfig {
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub ssa_threshold: f32,
    pub attn_scale: f32,
}

impl Default for SpikformerConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            ffn_hidden: 1024,
            blocks: 2,
            ssa_threshold: 0.25,
            attn_scale: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub encoder: EncoderKind,
    pub ts: usize,
    pub encoder_kernel: usize,
    pub lif: LifConfig,
    pub sew: SewMode,
    pub readout: Readout,
    pub rnn_hidden: usize,
    pub tcn: TcnConfig,
    pub ispikformer: SpikformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tcn,
            encoder: EncoderKind::Conv,
            ts: 4,
            encoder_kernel: DEFAULT_ENCODER_KERNEL,
            lif: LifConfig::default(),
            sew: SewMode::Add,
            readout: Readout::Rate,
            rnn_hidden: 128,
            tcn: TcnConfig::default(),
            ispikformer: SpikformerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.lif.validate()?;
        let positive = [
            ("ts", self.ts),
            ("encoder_kernel", self.encoder_kernel),
            ("rnn_hidden", self.rnn_hidden),
            ("tcn.channels", self.tcn.channels),
            ("tcn.blocks", self.tcn.blocks),
            ("tcn.kernel", self.tcn.kernel.unwrap_or(1)),
            ("ispikformer.d_model", self.ispikformer.d_model),
            ("ispikformer.ffn_hidden", self.ispikformer.ffn_hidden),
            ("ispikformer.blocks", self.ispikformer.blocks),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{k} must be at least 1")));
        }
        let sf = &self.ispikformer;
        if !(sf.ssa_threshold > self.lif.v_reset) || !sf.attn_scale.is_finite() || sf.attn_scale <= 0.0 {
            return Err(ModelError::Config(
                "ispikformer.ssa_threshold must exceed v_reset and attn_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lookback, horizon and channel count a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
}

/// Multiply-accumulate count of one layer for one sample and one sub-step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpCount {
    /// Matches the layer name reported to [`crate::graph::Monitor`].
    pub name: String,
    pub flops: u64,
    /// Consumes real-valued input, so it costs MACs even in the spiking model.
    pub float_input: bool,
}

impl OpCount {
    pub(crate) fn spiking(name: impl Into<String>, flops: usize) -> Self {
        Self {
            name: name.into(),
            flops: flops as u64,
            float_input: false,
        }
    }
}

/// Elementwise combine of two binary arrays.
///
/// `ADD` gives values in {0, 1, 2}; `AND` and `IAND` (`(1 - a) * b`) stay
/// binary.
pub fn sew_combine(g: &mut Graph, a: Var, b: Var, mode: SewMode) -> Result<Var, ModelError> {
    let out = match mode {
        SewMode::Add => g.add(a, b)?,
        SewMode::And => g.mul(a, b)?,
        SewMode::Iand => {
            let na = g.one_minus(a)?;
            g.mul(na, b)?
        }
    };
    Ok(out)
}

/// Collapses the leading `Ts` axis of `[Ts, rest..]` for the decoder.
pub fn readout(g: &mut Graph, s: Var, mode: Readout) -> Result<Var, ModelError> {
    Ok(match mode {
        Readout::Rate => g.mean_axis(s, 0)?,
        Readout::Flatten => {
            let shape = g.shape(s).to_vec();
            let r = shape.len();
            let mut perm: Vec<usize> = (1..r).collect();
            perm.insert(r - 1, 0);
            let p = g.permute(s, &perm)?;
            let mut out: Vec<usize> = shape[1..].to_vec();
            *out.last_mut().expect("rank >= 2") *= shape[0];
            g.reshape(p, &out)?
        }
    })
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Tcn(SpikeTcn),
    Rnn(SpikeRnn),
    Gru(SpikeGru),
    Ispikformer(ISpikformer),
}

/// Encoder, spiking backbone and linear decoder for `[B, T, C] -> [B, L, C]`.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore,
    encoder: Encoder,
    backbone: Backbone,
    decoder: Linear,
}

impl ForecastModel {
    pub fn new(config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if dims.lookback == 0 || dims.horizon == 0 || dims.channels == 0 {
            return Err(ModelError::Config(format!("lookback, horizon and channels must be positive, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, config.encoder, config.ts, config.encoder_kernel, config.lif)?;
        let (t, c, l) = (dims.lookback, dims.channels, dims.horizon);
        let flat = match config.readout {
            Readout::Rate => 1,
            Readout::Flatten => config.ts,
        };
        let (backbone, d_in, d_out) = match config.backbone {
            BackboneKind::Tcn => {
                let net = SpikeTcn::new(&mut params, &mut rng, config, c, t)?;
                let d = net.out_channels() * t;
                (Backbone::Tcn(net), d, l * c)
            }
            BackboneKind::Rnn => {
                let net = SpikeRnn::new(&mut params, &mut rng, config, c)?;
                (Backbone::Rnn(net), config.rnn_hidden, l * c)
            }
            BackboneKind::Gru => {
                let net = SpikeGru::new(&mut params, &mut rng, config, c)?;
                (Backbone::Gru(net), config.rnn_hidden, l * c)
            }
            BackboneKind::Ispikformer => {
                let net = ISpikformer::new(&mut params, &mut rng, config, t)?;
                (Backbone::Ispikformer(net), config.ispikformer.d_model, l)
            }
        };
        let decoder = Linear::new(&mut params, &mut rng, "decoder", d_in * flat, d_out, true)?;
        Ok(Self {
            config: config.clone(),
            dims,
            params,
            encoder,
            backbone,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn graph(&self, mode: Mode) -> Graph<'_> {
        Graph::new(&self.params, mode)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, ModelError> {
        match *x.shape() {
            [b, t, c] if t == self.dims.lookback && c == self.dims.channels => Ok(b),
            _ => Err(ModelError::InputShape {
                got: x.shape().to_vec(),
                expected: format!("[batch, {}, {}]", self.dims.lookback, self.dims.channels),
            }),
        }
    }

    /// Backbone output spikes: `[Ts, B, features]` for the TCN and recurrent
    /// nets, `[Ts, B, C, D]` for the iSpikformer.
    pub fn hidden(&self, g: &mut Graph, x: &Tensor) -> Result<Var, ModelError> {
        let b = self.check_input(x)?;
        let s = self.encoder.forward(g, x)?;
        self.backbone_forward(g, s, b)
    }

    /// Runs the backbone on an encoded train `[Ts, B, C, T]`.
    pub fn backbone_forward(&self, g: &mut Graph, s: Var, batch: usize) -> Result<Var, ModelError> {
        check_binary("backbone input", g.value(s).data())?;
        match &self.backbone {
            Backbone::Tcn(net) => {
                let h = net.forward(g, s)?;
                let ts = self.config.ts;
                Ok(g.reshape(h, &[ts, batch, net.out_channels() * self.dims.lookback])?)
            }
            Backbone::Rnn(net) => net.forward(g, s, None),
            Backbone::Gru(net) => net.forward(g, s, None),
            Backbone::Ispikformer(net) => net.forward(g, s),
        }
    }

    /// Readout plus affine map to `[B, L, C]`.
    pub fn decode(&self, g: &mut Graph, hidden: Var) -> Result<Var, ModelError> {
        let r = readout(g, hidden, self.config.readout)?;
        let y = self.decoder.forward(g, r)?;
        let shape = g.shape(y).to_vec();
        let (l, c) = (self.dims.horizon, self.dims.channels);
        Ok(match self.backbone {
            Backbone::Ispikformer(_) => {
                // [B, C, L] -> [B, L, C]
                g.permute(y, &[0, 2, 1])?
            }
            _ => g.reshape(y, &[shape[0], l, c])?,
        })
    }

    /// `[B, T, C]` to forecasts `[B, L, C]`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Var, ModelError> {
        let h = self.hidden(g, x)?;
        self.decode(g, h)
    }

    /// Inference on any number of windows, `chunk` at a time.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Tensor, ModelError> {
        let b = self.check_input(x)?;
        let (t, c, l) = (self.dims.lookback, self.dims.channels, self.dims.horizon);
        let mut out = Vec::with_capacity(b * l * c);
        for start in (0..b).step_by(chunk.max(1)) {
            let n = chunk.max(1).min(b - start);
            let xb = Tensor::new(vec![n, t, c], x.data()[start * t * c..(start + n) * t * c].to_vec())?;
            let mut g = self.graph(Mode::Eval);
            let y = self.forward(&mut g, &xb)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(Tensor::new(vec![b, l, c], out)?)
    }

    /// Per-layer operation counts for one sample, encoder to decoder.
    pub fn op_counts(&self) -> Vec<OpCount> {
        let (t, c) = (self.dims.lookback, self.dims.channels);
        let mut out = Vec::new();
        if let Some((name, flops)) = self.encoder.layer_flops(t, c) {
            out.push(OpCount {
                name,
                flops,
                float_input: true,
            });
        }
        out.extend(match &self.backbone {
            Backbone::Tcn(net) => net.op_counts(t),
            Backbone::Rnn(net) => net.op_counts(t, c),
            Backbone::Gru(net) => net.op_counts(t, c),
            Backbone::Ispikformer(net) => net.op_counts(c),
        });
        let rows = match self.backbone {
            Backbone::Ispikformer(_) => c,
            _ => 1,
        };
        out.push(OpCount {
            name: self.decoder.name.clone(),
            flops: self.decoder.flops_per_row() * rows as u64,
            float_input: true,
        });
        out
    }
}
