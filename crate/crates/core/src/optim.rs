//! Adam with serializable state and gradient accumulation.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

/// Pulls the gradients of `store`'s parameters out of a backward pass.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> Grads {
    store
        .params()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Sums micro-batch gradients, each scaled by `scale`.
#[derive(Debug, Default, Clone)]
pub struct GradAccumulator {
    sum: Grads,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: Grads, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let g = if scale == 1.0 { g } else { (g * scale)? };
            let next = match self.sum.remove(&name) {
                Some(prev) => (prev + g)?,
                None => g,
            };
            self.sum.insert(name, next);
        }
        Ok(())
    }

    pub fn take(&mut self) -> Grads {
        std::mem::take(&mut self.sum)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient; others are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in store.params() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.to_dtype(var.dtype())?;
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moment tensors as `m.<name>` / `v.<name>` under `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("{prefix}m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{prefix}v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restores moments and the step count. Moments are looked up for every
    /// parameter in `store`; missing entries mean the parameter never had a gradient.
    pub fn import(
        &mut self,
        store: &ParamStore,
        prefix: &str,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, var) in store.params() {
            let m = lookup(&format!("{prefix}m.{name}"));
            let v = lookup(&format!("{prefix}v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.dims() != var.dims() || v.dims() != var.dims() {
                        return Err(Error::Config(format!("optimizer state for `{name}` has the wrong shape")));
                    }
                    self.m.insert(name.to_string(), m.to_dtype(var.dtype())?);
                    self.v.insert(name.to_string(), v.to_dtype(var.dtype())?);
                }
                (None, None) => {}
                _ => return Err(Error::Config(format!("incomplete optimizer state for `{name}`"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_rng, ParamBuilder};
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::default();
        let mut rng = init_rng(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, DType::F64);
        pb.constant("w", &[3], 1.0).unwrap();
        let mut adam = Adam::new(AdamConfig::new(0.1, (0.9, 0.999))).unwrap();
        let g = Tensor::new(&[2.0f64, -3.0, 0.5], &Device::Cpu).unwrap();
        let grads: Grads = [("w".to_string(), g)].into_iter().collect();
        adam.step(&store, &grads).unwrap();
        let w = store.param("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for (got, want) in w.iter().zip([0.9, 1.1, 0.9]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn accumulator_sums_scaled() {
        let mut acc = GradAccumulator::default();
        let t = |v: f64| Tensor::new(&[v], &Device::Cpu).unwrap();
        acc.add([("a".to_string(), t(2.0))].into_iter().collect(), 0.5).unwrap();
        acc.add([("a".to_string(), t(4.0))].into_iter().collect(), 0.5).unwrap();
        let out = acc.take();
        assert_eq!(out["a"].to_vec1::<f64>().unwrap(), vec![3.0]);
        assert!(acc.take().is_empty());
    }
}
