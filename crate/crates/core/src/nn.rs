//! Parameter management and small layer helpers on top of candle.
//!
//! Weight initialization is driven by a per-parameter RNG derived from
//! `(store seed, parameter name)`, so model construction is deterministic and
//! independent of build order or any global RNG state.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    KaimingUniform { fan_in: usize },
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), seed, dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn name_seed(&self, name: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^ self.seed.rotate_left(17)
    }

    /// Creates (or returns) a named parameter.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.clone());
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.name_seed(name));
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// 3x3 or 1x1 convolution with bias, stride 1.
    pub fn conv2d(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        zero_init: bool,
    ) -> Result<Conv2d> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::KaimingUniform { fan_in: in_channels * kernel * kernel }
        };
        let weight = self.var(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            init,
        )?;
        let bias = self.var(&format!("{name}.bias"), &[out_channels], Init::Zeros)?;
        let cfg = Conv2dConfig { padding: kernel / 2, ..Default::default() };
        Ok(Conv2d::new(weight.as_tensor().clone(), Some(bias.as_tensor().clone()), cfg))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Loads values into existing parameters; names and shapes must match.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Dependency(format!("checkpoint {} is missing parameter {name}", path.display()))
            })?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Content hash of all parameter values, for frozen-weights checks and
    /// run manifests.
    pub fn weights_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            let values = var
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Rectifier used on density heads: forward is max(x, 0) but the subgradient
/// at 0 is 1, so zero-initialized heads still receive a learning signal.
pub fn rectify(x: &Tensor) -> Result<Tensor> {
    Ok(((x + x.abs()?)? * 0.5)?)
}
