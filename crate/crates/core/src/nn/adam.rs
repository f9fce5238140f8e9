use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are keyed by parameter name so they
/// can be checkpointed.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params` that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (((m * beta1)? + (g * (1.0 - beta1))?)?, ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?),
                None => ((g * (1.0 - beta1))?, (g.sqr()? * (1.0 - beta2))?),
            };
            let (m, v) = (m.detach(), v.detach());
            let update = (&m / bc1)?.div(&(((&v / bc2)?.sqrt()? + eps)?))?;
            let next = (var.as_tensor() - (update * learning_rate)?)?;
            var.set(&next.detach())?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.moments
            .iter()
            .flat_map(|(k, (m, v))| [(format!("{prefix}m.{k}"), m.clone()), (format!("{prefix}v.{k}"), v.clone())])
            .collect()
    }

    pub fn restore(&mut self, map: &HashMap<String, Tensor>, prefix: &str, step: u64, params: &ParamStore) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (name, var) in params.iter() {
            let m = map.get(&format!("{prefix}m.{name}"));
            let v = map.get(&format!("{prefix}v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    let dt = var.dtype();
                    self.moments.insert(name.clone(), (m.to_dtype(dt)?, v.to_dtype(dt)?));
                }
                (None, None) => {}
                _ => return Err(Error::Weights(format!("incomplete optimizer moments for {name}"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.constant("w".into(), &[3], 1.0).unwrap();
        let loss = (w.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&store, &grads).unwrap();
        let after = w.as_tensor().to_vec1::<f64>().unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps).
        for v in after {
            assert!((v - (1.0 - 2e-4 * 5.0 / (5.0 + 1e-8))).abs() < 1e-15);
        }
        assert_eq!(opt.tensors("").len(), 2);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.constant("w".into(), &[2], 3.0).unwrap();
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..300 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads).unwrap();
        }
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }
}
