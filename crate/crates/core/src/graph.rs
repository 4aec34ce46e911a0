//! Forward-pass context shared by encoders and backbones.

use std::ops::{Deref, DerefMut};

use thiserror::Error;

use crate::autograd::{BnUpdate, GradError, ParamId, ParamStore, Tape, Var};
use crate::lif::LifError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Lif(#[from] LifError),
    #[error("{layer} expects spike input but saw value {value}")]
    NonBinaryInput { layer: String, value: f32 },
    #[error("input shape {got:?} does not match model (expected {expected})")]
    InputShape { got: Vec<usize>, expected: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Observer of activity inside a forward pass.
///
/// Layers report the arrays entering synaptic (accumulate) layers, the
/// outputs of spiking layers, and the results of residual combines.
pub trait Monitor {
    fn synaptic_input(&mut self, _layer: &str, _values: &[f32]) {}
    fn spikes(&mut self, _layer: &str, _values: &[f32]) {}
    fn combined(&mut self, _layer: &str, _values: &[f32]) {}
}

/// A tape plus the parameter store it reads from.
///
/// Parameters are read-only during a forward pass; batch-norm running
/// statistics computed in training mode are queued and applied afterwards
/// with [`ParamStore::apply_bn_updates`].
pub struct Graph<'a> {
    tape: Tape,
    params: &'a ParamStore,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
    monitor: Option<&'a mut dyn Monitor>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            param_vars: vec![None; params.len()],
            mode,
            bn_updates: Vec::new(),
            monitor: None,
        }
    }

    pub fn with_monitor(params: &'a ParamStore, mode: Mode, monitor: &'a mut dyn Monitor) -> Self {
        let mut g = Self::new(params, mode);
        g.monitor = Some(monitor);
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Leaf for a stored parameter; repeated calls return the same leaf so
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Result<Var, GradError> {
        if let Some(v) = self.param_vars[id.index()] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let trainable = p.trainable && self.mode == Mode::Train;
        let v = self.tape.param_leaf(p.value.clone(), id, trainable)?;
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    pub(crate) fn queue_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn note_input(&mut self, layer: &str, v: Var) {
        if let Some(m) = self.monitor.as_deref_mut() {
            m.synaptic_input(layer, self.tape.value(v).data());
        }
    }

    pub fn note_spikes(&mut self, layer: &str, v: Var) {
        if let Some(m) = self.monitor.as_deref_mut() {
            m.spikes(layer, self.tape.value(v).data());
        }
    }

    pub fn note_combined(&mut self, layer: &str, v: Var) {
        if let Some(m) = self.monitor.as_deref_mut() {
            m.combined(layer, self.tape.value(v).data());
        }
    }

    pub fn into_parts(self) -> (Tape, Vec<BnUpdate>) {
        (self.tape, self.bn_updates)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
