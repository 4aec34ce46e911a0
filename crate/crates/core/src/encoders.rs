//! Spike encoders: float windows `[B, T, C]` to spike trains `[Ts, B, C, T]`.
//!
//! Every `(b, c, t)` position owns its own neurons, which start from the
//! reset state and run for `Ts` sub-steps. Encoding is therefore independent
//! across series steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::autograd::ParamStore;
use crate::graph::{Graph, ModelError};
use crate::layers::{BatchNorm, Conv1d, Linear, SpikeLayer};
use crate::lif::LifConfig;

pub const DEFAULT_ENCODER_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Delta,
    Conv,
    Repeat,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Conv, EncoderKind::Delta, EncoderKind::Repeat];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Delta => "delta",
            EncoderKind::Conv => "conv",
            EncoderKind::Repeat => "repeat",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delta" => Ok(Self::Delta),
            "conv" => Ok(Self::Conv),
            "repeat" => Ok(Self::Repeat),
            _ => Err(format!("unknown encoder '{s}' (expected delta, conv or repeat)")),
        }
    }
}

#[derive(Clone, Debug)]
enum FirstMap {
    Delta(Linear),
    Conv(Conv1d),
    Repeat,
}

/// Spike encoder with its learnable first map.
#[derive(Clone, Debug)]
pub struct Encoder {
    kind: EncoderKind,
    ts: usize,
    map: FirstMap,
    bn: Option<BatchNorm>,
    sn: SpikeLayer,
}

/// Binary array with its axis sizes, `[Ts, T, C]` for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    tensor: Tensor,
}

impl SpikeTrain {
    pub fn new(tensor: Tensor) -> Result<Self, ModelError> {
        crate::layers::check_binary("spike train", tensor.data())?;
        Ok(Self { tensor })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn firing_rate(&self) -> f64 {
        let n = self.tensor.len().max(1);
        self.tensor.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64
    }
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        kind: EncoderKind,
        ts: usize,
        kernel: usize,
        lif: LifConfig,
    ) -> Result<Self, ModelError> {
        if ts == 0 {
            return Err(ModelError::Config("Ts must be at least 1".into()));
        }
        let (map, bn) = match kind {
            EncoderKind::Delta => (
                FirstMap::Delta(Linear::new(store, rng, "encoder.delta", 1, ts, true)?),
                Some(BatchNorm::new(store, "encoder.bn", ts)?),
            ),
            EncoderKind::Conv => {
                if kernel == 0 {
                    return Err(ModelError::Config("encoder kernel must be at least 1".into()));
                }
                (
                    FirstMap::Conv(Conv1d::new(store, rng, "encoder.conv", 1, ts, kernel, 1, true)?),
                    Some(BatchNorm::new(store, "encoder.bn", ts)?),
                )
            }
            EncoderKind::Repeat => (FirstMap::Repeat, None),
        };
        Ok(Self {
            kind,
            ts,
            map,
            bn,
            sn: SpikeLayer::new("encoder.sn", lif),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn ts(&self) -> usize {
        self.ts
    }

    pub fn lif(&self) -> &LifConfig {
        &self.sn.lif
    }

    /// Encodes `x` of shape `[B, T, C]` into spikes `[Ts, B, C, T]`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Var, ModelError> {
        let [b, t, c] = match *x.shape() {
            [b, t, c] => [b, t, c],
            _ => {
                return Err(ModelError::InputShape {
                    got: x.shape().to_vec(),
                    expected: "[batch, T, C]".into(),
                })
            }
        };
        let ts = self.ts;
        let currents = match &self.map {
            FirstMap::Delta(lin) => {
                let d = g.constant(differences(x))?;
                // [B, T, C] -> [B, C, T, 1] -> affine -> [B, C, T, Ts]
                let d = g.permute(d, &[0, 2, 1])?;
                let d = g.reshape(d, &[b, c, t, 1])?;
                let z = lin.forward(g, d)?;
                let z = self.bn.as_ref().expect("delta encoder has bn").forward(g, z, 3)?;
                g.permute(z, &[3, 0, 1, 2])?
            }
            FirstMap::Conv(conv) => {
                let xv = g.constant(x.clone())?;
                let xv = g.permute(xv, &[0, 2, 1])?;
                let xv = g.reshape(xv, &[b * c, 1, t])?;
                let z = conv.forward(g, xv)?;
                let z = self.bn.as_ref().expect("conv encoder has bn").forward(g, z, 1)?;
                let z = g.reshape(z, &[b, c, ts, t])?;
                g.permute(z, &[2, 0, 1, 3])?
            }
            FirstMap::Repeat => {
                let xv = g.constant(x.clone())?;
                let xv = g.permute(xv, &[0, 2, 1])?;
                let copies = vec![xv; ts];
                g.stack(&copies)?
            }
        };
        self.sn.forward(g, currents)
    }

    /// Spike train of a single `[T, C]` window, laid out `[Ts, T, C]`.
    pub fn encode_window(&self, g: &mut Graph, x: &Tensor) -> Result<SpikeTrain, ModelError> {
        let [t, c] = match *x.shape() {
            [t, c] => [t, c],
            _ => {
                return Err(ModelError::InputShape {
                    got: x.shape().to_vec(),
                    expected: "[T, C]".into(),
                })
            }
        };
        if t == 0 {
            return Err(ModelError::InputShape {
                got: x.shape().to_vec(),
                expected: "T >= 1".into(),
            });
        }
        let batch = x.clone().reshaped(vec![1, t, c])?;
        let s = self.forward(g, &batch)?;
        let s = g.reshape(s, &[self.ts, c, t])?;
        let s = g.permute(s, &[0, 2, 1])?;
        SpikeTrain::new(g.value(s).clone())
    }

    /// `(name, flops per sample, is float layer)` for the first map.
    pub fn layer_flops(&self, t: usize, c: usize) -> Option<(String, u64)> {
        match &self.map {
            FirstMap::Delta(lin) => Some((lin.name.clone(), lin.flops_per_row() * (c * t) as u64)),
            FirstMap::Conv(conv) => Some((conv.name.clone(), conv.flops(t) * c as u64)),
            FirstMap::Repeat => None,
        }
    }
}

/// `x_t - x_{t-1}` along the time axis of `[B, T, C]`, with `x_0 := x_1`.
pub fn differences(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, t, c) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut out = vec![0.0f32; d.len()];
    for bi in 0..b {
        for ti in 1..t {
            for ci in 0..c {
                let i = (bi * t + ti) * c + ci;
                out[i] = d[i] - d[i - c];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape as input")
}
