use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::net::{GradSet, Network, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD-with-momentum update on a single tensor:
/// `v ← μv − lr·(g + wd·p)`, then `p ← p + v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(velocity)?;
    let (lr, mu, wd) = (T::of(cfg.learning_rate), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v - lr * (g + wd * *p);
        *p = *p + *v;
    }
    Ok(())
}

/// Velocity buffers plus hyperparameters.
///
/// Weight decay acts on the stored tensors, so for over-parameterized layers
/// it shrinks `D′` (and therefore `D` towards identity), never `D` itself.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f64> {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Self {
        OptimizerState {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id)
    }

    /// Updates every parameter that has a gradient in `grads`. Parameters
    /// without one are left untouched (this is how freezing works).
    pub fn step(&mut self, net: &mut Network<T>, grads: &GradSet<T>) -> Result<()> {
        for (id, grad) in grads.iter() {
            let param = net
                .param_mut(id)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {id}")))?;
            let velocity = match self.velocity.get_mut(id) {
                Some(v) => v,
                None => self
                    .velocity
                    .entry(*id)
                    .or_insert(Tensor::zeros(param.dims().to_vec())?),
            };
            sgd_update(param, grad, velocity, &self.config)?;
            if !param.all_finite() {
                return Err(Error::Numeric(format!("non-finite value in {id} after SGD step")));
            }
        }
        Ok(())
    }
}
