use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::{numel, Tensor};
use super::GradError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and other buffers are stored here too, untrainable.
    pub trainable: bool,
    pub grad: Vec<f32>,
}

/// Named registry of every array a model owns.
///
/// Models keep [`ParamId`]s; values live here so the whole model can be
/// snapshotted, serialized, and updated by an optimizer in one place.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId, GradError> {
        if self.by_name.contains_key(name) {
            return Err(GradError::InvalidArgument {
                op: "param",
                detail: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.params.len());
        let len = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            grad: vec![0.0; len],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId, GradError> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let data = (0..numel(shape)).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the stored gradients; they accumulate until
    /// [`ParamStore::zero_grad`].
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.trainable {
                for (d, s) in p.grad.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f32) {
        for u in updates {
            for (r, b) in self.params[u.mean_id.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.params[u.var_id.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> f32 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    /// Copies every value from `other`, which must have identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), GradError> {
        for p in &mut self.params {
            let src = other.id(&p.name).map(|id| other.value(id)).ok_or_else(|| {
                GradError::InvalidArgument {
                    op: "load",
                    detail: format!("missing parameter {}", p.name),
                }
            })?;
            if src.shape() != p.value.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "load",
                    detail: format!("{}: {:?} vs {:?}", p.name, src.shape(), p.value.shape()),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
