//! Named, deterministically initialized parameters.
//!
//! Every tensor is seeded from the store seed and its own name, so a module
//! gets the same initial weights no matter which other modules exist. The
//! ablation runs rely on this to compare configurations from a shared start.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Optimizer group: the visual backbone trains with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    params: BTreeMap<String, Param>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { dtype, device: Device::Cpu, seed, params: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> Result<Tensor> {
        if let Some(p) = self.params.get(name) {
            if p.var.dims() != shape {
                return Err(Error::Internal(format!(
                    "parameter {name} requested with shape {shape:?}, exists as {:?}",
                    p.var.dims()
                )));
            }
            return Ok(p.var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(out)
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Overwrites the value of an existing parameter.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Argument(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Constant tensor in the store's dtype.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}
