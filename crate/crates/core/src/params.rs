//! Named parameter storage shared by every network.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Trainable parameters and non-trainable buffers, keyed by dotted path.
///
/// Ordered maps keep iteration (and therefore optimizer updates and
/// serialization) deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Sets every trainable parameter to zero. Buffers are left alone.
    pub fn zero_all(&self) -> Result<()> {
        for var in self.params.values() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Snapshot of parameters and buffers, each name prefixed by `prefix`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(self.params.len() + self.buffers.len());
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            out.push((format!("{prefix}{name}"), var.as_tensor().copy()?));
        }
        Ok(out)
    }

    /// Overwrites every parameter and buffer from `lookup(prefix + name)`.
    pub fn import(&self, prefix: &str, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let key = format!("{prefix}{name}");
            let tensor = lookup(&key).ok_or_else(|| Error::Config(format!("missing tensor `{key}`")))?;
            if tensor.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    tensor.dims(),
                    var.dims()
                )));
            }
            var.set(&tensor.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let exported: BTreeMap<String, Tensor> = other.export("")?.into_iter().collect();
        self.import("", |k| exported.get(k).cloned())
    }
}

/// Registers parameters under a path prefix while a network is being built.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, dtype: DType) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor, buffer: bool) -> Result<Var> {
        let key = self.key(name);
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        let map = if buffer {
            &mut self.store.buffers
        } else {
            &mut self.store.params
        };
        if map.insert(key.clone(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{key}`")));
        }
        Ok(var)
    }

    /// Uniform in `[-bound, bound]`, drawn from the builder's seeded stream.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let count: usize = shape.iter().product();
        let values: Vec<f64> = (0..count)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let tensor = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, tensor, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let tensor = Tensor::full(value, shape, &self.device)?;
        self.insert(name, tensor, false)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let tensor = Tensor::full(value, shape, &self.device)?;
        self.insert(name, tensor, true)
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
