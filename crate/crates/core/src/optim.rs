//! SGD with (Nesterov) momentum and L2 weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        SgdState {
            learning_rate,
            momentum,
            weight_decay,
            nesterov,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.velocity.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.velocity.insert(name.into(), v);
    }

    /// Applies one update to each named parameter. The weight-decay term is
    /// added to the gradient before the momentum recurrence:
    ///
    /// ```text
    /// g = grad + wd * p
    /// v = mu * v + g
    /// p -= lr * (g + mu * v)   // nesterov
    /// p -= lr * v              // classic
    /// ```
    ///
    /// Gradients are left untouched.
    pub fn step<'n>(&mut self, store: &mut ParamStore, names: impl IntoIterator<Item = &'n str>) -> Result<()> {
        for name in names {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Optimizer(format!("unknown parameter {name}")))?;
            let n = p.numel();
            let grad = p
                .grad()
                .ok_or_else(|| Error::Optimizer(format!("parameter {name} has no gradient")))?
                .to_vec();
            let vel = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if vel.len() != n {
                return Err(Error::Optimizer(format!(
                    "velocity for {name} has {} values, parameter has {n}",
                    vel.len()
                )));
            }
            let data = p.data_mut();
            for j in 0..n {
                let g = grad[j] + self.weight_decay * data[j];
                let d = if self.momentum != 0.0 {
                    vel[j] = self.momentum * vel[j] + g;
                    if self.nesterov {
                        g + self.momentum * vel[j]
                    } else {
                        vel[j]
                    }
                } else {
                    g
                };
                data[j] -= self.learning_rate * d;
            }
        }
        Ok(())
    }
}
