use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ModelParams;
use crate::numerics::{Gradients, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Rescales `grads` in place so their global norm is at most `threshold`.
/// Returns the norm before clipping. A threshold of 0 disables clipping.
pub fn clip_global_norm(grads: &mut Gradients, threshold: f64) -> f64 {
    let norm = grads.global_norm();
    if threshold > 0.0 && norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates only the tensors present in `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        self.t += 1;
        for (id, g) in grads.iter() {
            if id.0 >= params.tensors().len() {
                return Err(Error::Input(format!("gradient for unknown tensor {}", id.0)));
            }
            let data = &mut params.tensor_mut(id).data;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in data.iter_mut().zip(g) {
                        *p -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - BETA1.powi(self.t as i32);
                    let c2 = 1.0 - BETA2.powi(self.t as i32);
                    for (((p, gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
