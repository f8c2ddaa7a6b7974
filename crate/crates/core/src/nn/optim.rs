use serde::{Deserialize, Serialize};

use super::state::ModelState;
use crate::error::Result;
use crate::tensor::NamedTensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Client-local optimizer state. Never exchanged with the server.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub learning_rate: f64,
    /// First and second Adam moments, one pair per model tensor in name order.
    moments: Option<Vec<(NamedTensor, NamedTensor)>>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            step: 0,
            learning_rate,
            moments: None,
        }
    }

    pub fn adam(model: &ModelState, learning_rate: f64) -> Result<Self> {
        let moments = model
            .tensors()
            .map(|t| {
                Ok((
                    NamedTensor::zeros(t.name(), t.shape().to_vec())?,
                    NamedTensor::zeros(t.name(), t.shape().to_vec())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OptimizerState {
            kind: OptimizerKind::Adam,
            step: 0,
            learning_rate,
            moments: Some(moments),
        })
    }

    /// Adam with the default learning rate 1e-3.
    pub fn default_adam(model: &ModelState) -> Result<Self> {
        Self::adam(model, 1e-3)
    }

    pub fn moments(&self) -> Option<&[(NamedTensor, NamedTensor)]> {
        self.moments.as_deref()
    }

    /// Applies one update; `grads` is in the model's tensor order.
    pub(crate) fn apply(&mut self, model: &mut ModelState, grads: &[Vec<f32>]) {
        self.step += 1;
        let lr = self.learning_rate;
        match (self.kind, self.moments.as_mut()) {
            (OptimizerKind::Adam, Some(moments)) => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let step_size = (lr / c1) as f32;
                let c2_sqrt = c2.sqrt() as f32;
                let (b1, b2, eps) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32);
                for ((param, g), (m, v)) in model.tensors_mut().zip(grads).zip(moments.iter_mut()) {
                    let (m, v) = (m.values_mut(), v.values_mut());
                    for (((p, &g), m), v) in param.values_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                    }
                }
            }
            _ => {
                let lr = lr as f32;
                for (param, g) in model.tensors_mut().zip(grads) {
                    for (p, &g) in param.values_mut().iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
        }
    }
}
