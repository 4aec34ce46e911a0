//! Leaky integrate-and-fire neurons with an arctangent surrogate gradient.
//!
//! One step of a layer of `N` neurons:
//!
//! ```text
//! U = H_prev + I
//! S = 1 if U >= u_thr else 0
//! H = v_reset * S + (1 - S) * beta * U
//! ```
//!
//! The Heaviside step has no useful derivative, so the reverse pass replaces
//! dS/dU with `(alpha / 2) / (1 + (pi/2 * alpha * u)^2)`, the derivative of
//! `atan(pi/2 * alpha * u) / pi + 1/2`.

use std::f32::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{CustomFn, GradError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LifError {
    #[error("threshold {u_thr} must exceed reset potential {v_reset}")]
    ThresholdBelowReset { u_thr: f32, v_reset: f32 },
    #[error("decay rate {0} must lie in (0, 1]")]
    InvalidBeta(f32),
    #[error("surrogate sharpness {0} must be positive")]
    InvalidAlpha(f32),
    #[error("spiking layer needs at least one time step")]
    NoSteps,
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    pub u_thr: f32,
    pub beta: f32,
    pub v_reset: f32,
    pub alpha: f32,
    /// Evaluate the surrogate at `U - u_thr` rather than at `U`.
    pub center_at_threshold: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            u_thr: 1.0,
            beta: 0.99,
            v_reset: 0.0,
            alpha: 2.0,
            center_at_threshold: true,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<(), LifError> {
        if !(self.u_thr > self.v_reset) {
            return Err(LifError::ThresholdBelowReset {
                u_thr: self.u_thr,
                v_reset: self.v_reset,
            });
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(LifError::InvalidBeta(self.beta));
        }
        if !(self.alpha > 0.0) {
            return Err(LifError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }

    pub fn with_threshold(mut self, u_thr: f32) -> Self {
        self.u_thr = u_thr;
        self
    }

    fn spike_fn(&self) -> Arc<dyn CustomFn> {
        Arc::new(SpikeFn {
            threshold: self.u_thr,
            alpha: self.alpha,
            centered: self.center_at_threshold,
        })
    }
}

/// dS/dU of the arctangent surrogate.
pub fn surrogate_grad(u: f32, alpha: f32) -> f32 {
    let z = FRAC_PI_2 * alpha * u;
    (alpha / 2.0) / (1.0 + z * z)
}

/// Heaviside forward, arctangent surrogate backward.
#[derive(Clone, Copy, Debug)]
pub struct SpikeFn {
    pub threshold: f32,
    pub alpha: f32,
    pub centered: bool,
}

impl CustomFn for SpikeFn {
    fn name(&self) -> &'static str {
        "spike"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError> {
        let u = inputs[0];
        let s = u
            .data()
            .iter()
            .map(|&v| if v >= self.threshold { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(u.shape().to_vec(), s)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f32]) -> Vec<Option<Vec<f32>>> {
        let shift = if self.centered { self.threshold } else { 0.0 };
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad_output)
            .map(|(&u, &g)| g * surrogate_grad(u - shift, self.alpha))
            .collect();
        vec![Some(g)]
    }
}

/// Temporal output `H` of a layer of neurons between steps.
///
/// `None` stands for the freshly reset state where every neuron sits at
/// `v_reset`.
#[derive(Clone, Debug, Default)]
pub struct LifState {
    h: Option<Var>,
    step_count: usize,
}

impl LifState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn h(&self) -> Option<Var> {
        self.h
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Membrane values for `n` neurons.
    pub fn membrane(&self, tape: &Tape, n: usize, cfg: &LifConfig) -> Vec<f32> {
        match self.h {
            Some(h) => tape.value(h).data().to_vec(),
            None => vec![cfg.v_reset; n],
        }
    }

    /// Returns every neuron to `v_reset` and clears the step counter.
    pub fn reset(&mut self) {
        self.h = None;
        self.step_count = 0;
    }
}

/// Functional form of [`LifState::reset`].
pub fn reset_state(_state: LifState, _cfg: &LifConfig) -> LifState {
    LifState::new()
}

/// Advances every neuron by one step with input current `i`, returning spikes.
pub fn lif_step(tape: &mut Tape, i: Var, state: &mut LifState, cfg: &LifConfig) -> Result<Var, LifError> {
    let u = match state.h {
        Some(h) => tape.add(h, i)?,
        None if cfg.v_reset == 0.0 => i,
        None => tape.add_scalar(i, cfg.v_reset)?,
    };
    let s = tape.custom(cfg.spike_fn(), &[u])?;
    let h = tape.lif_reset(u, s, cfg.beta, cfg.v_reset)?;
    state.h = Some(h);
    state.step_count += 1;
    Ok(s)
}

/// Runs a layer over the leading axis of `currents` (`[T', ...]`).
///
/// State carries across the `T'` steps and is left at the final step.
pub fn sn_layer(tape: &mut Tape, currents: Var, cfg: &LifConfig, state: &mut LifState) -> Result<Var, LifError> {
    let steps = *tape.shape(currents).first().ok_or(LifError::NoSteps)?;
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let i = tape.select(currents, 0, t)?;
        spikes.push(lif_step(tape, i, state, cfg)?);
    }
    Ok(tape.stack(&spikes)?)
}
