//! Spike-TCN: dilated causal convolutions whose activations are spikes.
//!
//! Input and output use the conv layout `[Ts * B, channels, T]`. Spiking
//! layers run over the folded `Ts` axis only, so every neuron at series step
//! `t` starts from rest and the whole window is processed at once.

use rand::Rng;

use super::{sew_combine, ModelConfig, OpCount, SewMode};
use crate::autograd::{ParamStore, Var};
use crate::graph::{Graph, ModelError};
use crate::layers::{BatchNorm, Conv1d, SpikeLayer};

#[derive(Clone, Debug)]
struct Block {
    name: String,
    conv: Conv1d,
    bn: BatchNorm,
    sn: SpikeLayer,
    down: Option<(Conv1d, BatchNorm, SpikeLayer)>,
    out_sn: SpikeLayer,
}

#[derive(Clone, Debug)]
pub struct SpikeTcn {
    blocks: Vec<Block>,
    ts: usize,
    sew: SewMode,
    channels: usize,
    kernel: usize,
}

impl SpikeTcn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        in_channels: usize,
        lookback: usize,
    ) -> Result<Self, ModelError> {
        let kernel = cfg.tcn.kernel_for(lookback);
        let channels = cfg.tcn.channels;
        let mut blocks = Vec::with_capacity(cfg.tcn.blocks);
        let mut c_in = in_channels;
        for i in 0..cfg.tcn.blocks {
            let name = format!("tcn.block{i}");
            let dilation = 1 << i;
            let conv = Conv1d::new(store, rng, &format!("{name}.conv"), c_in, channels, kernel, dilation, true)?;
            let bn = BatchNorm::new(store, &format!("{name}.bn"), channels)?;
            let down = if c_in != channels {
                Some((
                    Conv1d::new(store, rng, &format!("{name}.down"), c_in, channels, 1, 1, true)?,
                    BatchNorm::new(store, &format!("{name}.down_bn"), channels)?,
                    SpikeLayer::new(&format!("{name}.down_sn"), cfg.lif),
                ))
            } else {
                None
            };
            blocks.push(Block {
                sn: SpikeLayer::new(&format!("{name}.sn"), cfg.lif),
                out_sn: SpikeLayer::new(&format!("{name}.out_sn"), cfg.lif),
                name,
                conv,
                bn,
                down,
            });
            c_in = channels;
        }
        Ok(Self {
            blocks,
            ts: cfg.ts,
            sew: cfg.sew,
            channels,
            kernel,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Spikes `[Ts, B, C, T]` to block output spikes `[Ts * B, channels, T]`.
    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<Var, ModelError> {
        let shape = g.shape(s).to_vec();
        let [ts, b, c, t] = shape[..] else {
            return Err(ModelError::InputShape {
                got: shape,
                expected: "[Ts, batch, C, T]".into(),
            });
        };
        let mut x = g.reshape(s, &[ts * b, c, t])?;
        for blk in &self.blocks {
            let y = blk.conv.forward(g, x)?;
            let y = blk.bn.forward(g, y, 1)?;
            let y = blk.sn.forward_folded(g, y, self.ts)?;
            let r = match &blk.down {
                Some((conv, bn, sn)) => {
                    let r = conv.forward(g, x)?;
                    let r = bn.forward(g, r, 1)?;
                    sn.forward_folded(g, r, self.ts)?
                }
                None => x,
            };
            let add_name = format!("{}.sew", blk.name);
            g.note_input(&add_name, y);
            let combined = sew_combine(g, y, r, self.sew)?;
            g.note_combined(&add_name, combined);
            x = blk.out_sn.forward_folded(g, combined, self.ts)?;
        }
        Ok(x)
    }

    pub fn op_counts(&self, lookback: usize) -> Vec<OpCount> {
        let mut out = Vec::new();
        for blk in &self.blocks {
            out.push(OpCount::spiking(&blk.conv.name, blk.conv.flops(lookback) as usize));
            if let Some((down, _, _)) = &blk.down {
                out.push(OpCount::spiking(&down.name, down.flops(lookback) as usize));
            }
            out.push(OpCount::spiking(format!("{}.sew", blk.name), self.channels * lookback));
        }
        out
    }
}
