//! Parameterized building blocks shared by encoders and backbones.

use rand::Rng;

use crate::autograd::{BnLayout, BnUpdate, GradError, ParamId, ParamStore, Tensor, Var};
use crate::graph::{Graph, Mode, ModelError};
use crate::lif::{sn_layer, LifConfig, LifState};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// `y = x W + b` on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self, GradError> {
        let w = store.add_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in, rng)?;
        let b = if bias {
            Some(store.add_uniform(&format!("{name}.bias"), &[d_out], d_in, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        g.note_input(&self.name, x);
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        Ok(g.affine(x, w, b)?)
    }

    /// Multiply-accumulates for one input row.
    pub fn flops_per_row(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}

/// Causal dilated convolution over `[n, c_in, t]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self, GradError> {
        let fan_in = c_in * kernel;
        let w = store.add_uniform(&format!("{name}.weight"), &[c_out, c_in, kernel], fan_in, rng)?;
        let b = if bias {
            Some(store.add_uniform(&format!("{name}.bias"), &[c_out], fan_in, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            c_in,
            c_out,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        g.note_input(&self.name, x);
        let w = g.param(self.w)?;
        let b = self.b.map(|b| g.param(b)).transpose()?;
        Ok(g.conv1d_causal(x, w, b, self.dilation)?)
    }

    /// Multiply-accumulates for one input sequence of length `t`.
    pub fn flops(&self, t: usize) -> u64 {
        (self.c_out * self.c_in * self.kernel * t) as u64
    }
}

/// Per-feature batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self, GradError> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[features], 1.0), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[features]), true)?,
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[features]), false)?,
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(&[features], 1.0), false)?,
            features,
        })
    }

    /// Normalizes each index of `axis` over every other axis.
    pub fn forward(&self, g: &mut Graph, x: Var, axis: usize) -> Result<Var, ModelError> {
        let layout = BnLayout::for_axis(g.shape(x), axis)?;
        if layout.features != self.features {
            return Err(GradError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("{} features, layer has {}", layout.features, self.features),
            }
            .into());
        }
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        match g.mode() {
            Mode::Train => {
                let (y, batch_mean, batch_var) = g.batchnorm_train(x, gamma, beta, layout, BN_EPS)?;
                g.queue_bn_update(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let params = g.params();
                let mean = params.value(self.running_mean).data();
                let var = params.value(self.running_var).data();
                Ok(g.batchnorm_eval(x, gamma, beta, layout, mean, var, BN_EPS)?)
            }
        }
    }
}

/// A layer of LIF neurons run over the leading axis of its input currents,
/// starting from the reset state.
#[derive(Clone, Debug)]
pub struct SpikeLayer {
    pub name: String,
    pub lif: LifConfig,
}

impl SpikeLayer {
    pub fn new(name: &str, lif: LifConfig) -> Self {
        Self {
            name: name.to_string(),
            lif,
        }
    }

    pub fn forward(&self, g: &mut Graph, currents: Var) -> Result<Var, ModelError> {
        let mut state = LifState::new();
        let s = sn_layer(g, currents, &self.lif, &mut state)?;
        g.note_spikes(&self.name, s);
        Ok(s)
    }

    /// Same as [`SpikeLayer::forward`] for inputs whose leading axis folds
    /// `ts` sub-steps into the batch, `[ts * n, ...]`.
    pub fn forward_folded(&self, g: &mut Graph, currents: Var, ts: usize) -> Result<Var, ModelError> {
        let shape = g.shape(currents).to_vec();
        let total: usize = shape.iter().product();
        let x = g.reshape(currents, &[ts, total / ts])?;
        let s = self.forward(g, x)?;
        Ok(g.reshape(s, &shape)?)
    }
}

/// Fails unless every element is 0 or 1.
pub fn check_binary(layer: &str, values: &[f32]) -> Result<(), ModelError> {
    match values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&value) => Err(ModelError::NonBinaryInput {
            layer: layer.to_string(),
            value,
        }),
        None => Ok(()),
    }
}
