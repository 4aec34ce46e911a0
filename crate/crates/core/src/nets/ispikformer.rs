//! iSpikformer: channels are tokens, attention runs between binary matrices.
//!
//! Every sub-step is a separate pass over the token set, so all products
//! are between spike matrices and every spiking layer runs over `Ts`.

use rand::Rng;

use super::{sew_combine, ModelConfig, OpCount, SewMode};
use crate::autograd::{ParamStore, Var};
use crate::graph::{Graph, ModelError};
use crate::layers::{BatchNorm, Linear, SpikeLayer};
use crate::lif::LifConfig;

/// Linear, batch norm over the feature axis, spiking layer over `Ts`.
#[derive(Clone, Debug)]
struct SpikingLinear {
    lin: Linear,
    bn: BatchNorm,
    sn: SpikeLayer,
}

impl SpikingLinear {
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        lif: LifConfig,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            lin: Linear::new(store, rng, name, d_in, d_out, true)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), d_out)?,
            sn: SpikeLayer::new(&format!("{name}.sn"), lif),
        })
    }

    /// `[Ts, B, C, d_in]` to spikes `[Ts, B, C, d_out]`.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let y = self.lin.forward(g, x)?;
        let y = self.bn.forward(g, y, 3)?;
        self.sn.forward(g, y)
    }

    fn flops(&self, tokens: usize) -> OpCount {
        OpCount::spiking(&self.lin.name, tokens * self.lin.d_in * self.lin.d_out)
    }
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    q: SpikingLinear,
    k: SpikingLinear,
    v: SpikingLinear,
    attn_sn: SpikeLayer,
    proj: SpikingLinear,
    mid_sn: SpikeLayer,
    fc1: SpikingLinear,
    fc2: SpikingLinear,
    out_sn: SpikeLayer,
}

#[derive(Clone, Debug)]
pub struct ISpikformer {
    embed: SpikingLinear,
    blocks: Vec<Block>,
    scale: f32,
    sew: SewMode,
    d_model: usize,
}

impl ISpikformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        lookback: usize,
    ) -> Result<Self, ModelError> {
        let sc = &cfg.ispikformer;
        let (d, f) = (sc.d_model, sc.ffn_hidden);
        let ssa = cfg.lif.with_threshold(sc.ssa_threshold);
        let embed = SpikingLinear::new(store, rng, "ispk.embed", lookback, d, cfg.lif)?;
        let mut blocks = Vec::with_capacity(sc.blocks);
        for i in 0..sc.blocks {
            let name = format!("ispk.block{i}");
            let n = |s: &str| format!("{name}.{s}");
            blocks.push(Block {
                q: SpikingLinear::new(store, rng, &n("q"), d, d, ssa)?,
                k: SpikingLinear::new(store, rng, &n("k"), d, d, ssa)?,
                v: SpikingLinear::new(store, rng, &n("v"), d, d, ssa)?,
                attn_sn: SpikeLayer::new(&n("attn_sn"), ssa),
                proj: SpikingLinear::new(store, rng, &n("proj"), d, d, cfg.lif)?,
                mid_sn: SpikeLayer::new(&n("mid_sn"), cfg.lif),
                fc1: SpikingLinear::new(store, rng, &n("fc1"), d, f, cfg.lif)?,
                fc2: SpikingLinear::new(store, rng, &n("fc2"), f, d, cfg.lif)?,
                out_sn: SpikeLayer::new(&n("out_sn"), cfg.lif),
                name,
            });
        }
        Ok(Self {
            embed,
            blocks,
            scale: sc.attn_scale,
            sew: cfg.sew,
            d_model: d,
        })
    }

    /// Spiking self-attention over the `C` tokens of `x` (`[Ts, B, C, D]`).
    fn attention(&self, g: &mut Graph, blk: &Block, x: Var) -> Result<Var, ModelError> {
        let shape = g.shape(x).to_vec();
        let (ts, b, c, d) = (shape[0], shape[1], shape[2], shape[3]);
        let q = blk.q.forward(g, x)?;
        let k = blk.k.forward(g, x)?;
        let v = blk.v.forward(g, x)?;
        let q = g.reshape(q, &[ts * b, c, d])?;
        let k = g.reshape(k, &[ts * b, c, d])?;
        let v = g.reshape(v, &[ts * b, c, d])?;
        // integer-valued scores; the accumulations are gated by the spikes of q and v
        g.note_input(&format!("{}.qk", blk.name), q);
        let scores = g.bmm(q, k, true)?;
        g.note_input(&format!("{}.av", blk.name), v);
        let a = g.bmm(scores, v, false)?;
        let a = g.scale(a, self.scale)?;
        let a = g.reshape(a, &[ts, b, c, d])?;
        let a = blk.attn_sn.forward(g, a)?;
        blk.proj.forward(g, a)
    }

    /// Spikes `[Ts, B, C, T]` to token spikes `[Ts, B, C, D]`.
    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<Var, ModelError> {
        if g.shape(s).len() != 4 {
            return Err(ModelError::InputShape {
                got: g.shape(s).to_vec(),
                expected: "[Ts, batch, C, T]".into(),
            });
        }
        let mut x = self.embed.forward(g, s)?;
        for blk in &self.blocks {
            let a = self.attention(g, blk, x)?;
            let add1 = format!("{}.sew1", blk.name);
            g.note_input(&add1, a);
            let x1 = sew_combine(g, a, x, self.sew)?;
            g.note_combined(&add1, x1);
            let x1 = blk.mid_sn.forward(g, x1)?;
            let m = blk.fc1.forward(g, x1)?;
            let m = blk.fc2.forward(g, m)?;
            let add2 = format!("{}.sew2", blk.name);
            g.note_input(&add2, m);
            let x2 = sew_combine(g, m, x1, self.sew)?;
            g.note_combined(&add2, x2);
            x = blk.out_sn.forward(g, x2)?;
        }
        Ok(x)
    }

    pub fn op_counts(&self, tokens: usize) -> Vec<OpCount> {
        let d = self.d_model;
        let mut out = vec![self.embed.flops(tokens)];
        for blk in &self.blocks {
            out.push(blk.q.flops(tokens));
            out.push(blk.k.flops(tokens));
            out.push(blk.v.flops(tokens));
            out.push(OpCount::spiking(format!("{}.qk", blk.name), tokens * tokens * d));
            out.push(OpCount::spiking(format!("{}.av", blk.name), tokens * tokens * d));
            out.push(blk.proj.flops(tokens));
            out.push(OpCount::spiking(format!("{}.sew1", blk.name), tokens * d));
            out.push(blk.fc1.flops(tokens));
            out.push(blk.fc2.flops(tokens));
            out.push(OpCount::spiking(format!("{}.sew2", blk.name), tokens * d));
        }
        out
    }
}
