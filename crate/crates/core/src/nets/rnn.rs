//! Recurrent spiking cells. Membrane state persists across every sub-step of
//! every series step in a window and starts from rest for each window.
//!
//! Spike-GRU, with each gate a persistent LIF layer `SN`:
//!
//! ```text
//! r  = SN_r(x W_ir + b_ir + h W_hr + b_hr)
//! z  = SN_z(x W_iz + b_iz + h W_hz + b_hz)
//! n  = SN_n(x W_in + b_in + r * (h W_hn + b_hn))
//! h' = z * h + (1 - z) * n
//! ```
//!
//! With binary gates the state update is a multiplexer and `h'` stays binary.

use rand::Rng;

use super::{ModelConfig, OpCount};
use crate::autograd::{ParamStore, Tensor, Var};
use crate::graph::{Graph, ModelError};
use crate::layers::Linear;
use crate::lif::{lif_step, LifConfig, LifState};

/// `[Ts, B, C, T]` to per-step inputs `[T * Ts, B, C]`, t-major.
fn step_inputs(g: &mut Graph, s: Var) -> Result<(Var, [usize; 4]), ModelError> {
    let shape = g.shape(s).to_vec();
    let [ts, b, c, t] = shape[..] else {
        return Err(ModelError::InputShape {
            got: shape,
            expected: "[Ts, batch, C, T]".into(),
        });
    };
    let p = g.permute(s, &[3, 0, 1, 2])?;
    Ok((g.reshape(p, &[t * ts, b, c])?, [ts, b, c, t]))
}

#[derive(Clone, Debug)]
pub struct SpikeRnn {
    input: Linear,
    recurrent: Linear,
    lif: LifConfig,
    hidden: usize,
}

impl SpikeRnn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        in_channels: usize,
    ) -> Result<Self, ModelError> {
        let h = cfg.rnn_hidden;
        Ok(Self {
            input: Linear::new(store, rng, "rnn.input", in_channels, h, true)?,
            recurrent: Linear::new(store, rng, "rnn.recurrent", h, h, true)?,
            lif: cfg.lif,
            hidden: h,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Hidden spikes `[B, H]` for every step, in series-step-major order.
    /// With `reset_at = Some(t)` the state is zeroed before series step `t`.
    pub fn steps(&self, g: &mut Graph, s: Var, reset_at: Option<usize>) -> Result<Vec<Var>, ModelError> {
        let (x, [ts, b, _, t]) = step_inputs(g, s)?;
        let cur_in = self.input.forward(g, x)?;
        let mut state = LifState::new();
        let mut h: Option<Var> = None;
        let mut out = Vec::with_capacity(t * ts);
        for k in 0..t * ts {
            if reset_at == Some(k / ts) && k % ts == 0 {
                state.reset();
                h = None;
            }
            let mut cur = g.select(cur_in, 0, k)?;
            if let Some(h) = h {
                let rec = self.recurrent.forward(g, h)?;
                cur = g.add(cur, rec)?;
            } else {
                let zeros = g.constant(Tensor::zeros(&[b, self.hidden]))?;
                let rec = self.recurrent.forward(g, zeros)?;
                cur = g.add(cur, rec)?;
            }
            let spk = lif_step(g, cur, &mut state, &self.lif)?;
            g.note_spikes("rnn.sn", spk);
            h = Some(spk);
            out.push(spk);
        }
        Ok(out)
    }

    /// Spikes `[Ts, B, H]` of the final series step.
    pub fn forward(&self, g: &mut Graph, s: Var, reset_at: Option<usize>) -> Result<Var, ModelError> {
        let ts = g.shape(s)[0];
        let all = self.steps(g, s, reset_at)?;
        Ok(g.stack(&all[all.len() - ts..])?)
    }

    pub fn op_counts(&self, lookback: usize, in_channels: usize) -> Vec<OpCount> {
        vec![
            OpCount::spiking(&self.input.name, lookback * in_channels * self.hidden),
            OpCount::spiking(&self.recurrent.name, lookback * self.hidden * self.hidden),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SpikeGru {
    input: Linear,
    recurrent: Linear,
    lif: LifConfig,
    hidden: usize,
}

impl SpikeGru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        in_channels: usize,
    ) -> Result<Self, ModelError> {
        let h = cfg.rnn_hidden;
        // gate order in the stacked weights: r, z, n
        Ok(Self {
            input: Linear::new(store, rng, "gru.input", in_channels, 3 * h, true)?,
            recurrent: Linear::new(store, rng, "gru.recurrent", h, 3 * h, true)?,
            lif: cfg.lif,
            hidden: h,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// One cell update from input currents `gi = x W_i + b_i` (`[B, 3H]`).
    fn cell(
        &self,
        g: &mut Graph,
        gi: Var,
        h: Var,
        states: &mut [LifState; 3],
    ) -> Result<Var, ModelError> {
        let hd = self.hidden;
        let gh = self.recurrent.forward(g, h)?;
        let (ir, iz, inn) = (g.slice(gi, 1, 0, hd)?, g.slice(gi, 1, hd, hd)?, g.slice(gi, 1, 2 * hd, hd)?);
        let (hr, hz, hn) = (g.slice(gh, 1, 0, hd)?, g.slice(gh, 1, hd, hd)?, g.slice(gh, 1, 2 * hd, hd)?);
        let cr = g.add(ir, hr)?;
        let r = lif_step(g, cr, &mut states[0], &self.lif)?;
        let cz = g.add(iz, hz)?;
        let z = lif_step(g, cz, &mut states[1], &self.lif)?;
        let gated = g.mul(r, hn)?;
        let cn = g.add(inn, gated)?;
        let n = lif_step(g, cn, &mut states[2], &self.lif)?;
        g.note_spikes("gru.r", r);
        g.note_spikes("gru.z", z);
        g.note_spikes("gru.n", n);
        let keep = g.mul(z, h)?;
        let nz = g.one_minus(z)?;
        let take = g.mul(nz, n)?;
        let h_new = g.add(keep, take)?;
        g.note_spikes("gru.h", h_new);
        Ok(h_new)
    }

    pub fn steps(&self, g: &mut Graph, s: Var, reset_at: Option<usize>) -> Result<Vec<Var>, ModelError> {
        let (x, [ts, b, _, t]) = step_inputs(g, s)?;
        let cur_in = self.input.forward(g, x)?;
        let zeros = g.constant(Tensor::zeros(&[b, self.hidden]))?;
        let mut states: [LifState; 3] = Default::default();
        let mut h = zeros;
        let mut out = Vec::with_capacity(t * ts);
        for k in 0..t * ts {
            if reset_at == Some(k / ts) && k % ts == 0 {
                states.iter_mut().for_each(LifState::reset);
                h = zeros;
            }
            let gi = g.select(cur_in, 0, k)?;
            h = self.cell(g, gi, h, &mut states)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Spikes `[Ts, B, H]` of the final series step.
    pub fn forward(&self, g: &mut Graph, s: Var, reset_at: Option<usize>) -> Result<Var, ModelError> {
        let ts = g.shape(s)[0];
        let all = self.steps(g, s, reset_at)?;
        Ok(g.stack(&all[all.len() - ts..])?)
    }

    pub fn op_counts(&self, lookback: usize, in_channels: usize) -> Vec<OpCount> {
        vec![
            OpCount::spiking(&self.input.name, lookback * in_channels * 3 * self.hidden),
            OpCount::spiking(&self.recurrent.name, lookback * self.hidden * 3 * self.hidden),
        ]
    }
}
