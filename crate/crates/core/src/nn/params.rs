use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::util::sha256_chunks;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Only used for gradient checks.
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Named trainable parameters of one model, initialized from a private seeded RNG.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name, v.clone());
        Ok(v)
    }

    pub fn gaussian(&mut self, name: String, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies keyed by `prefix + name`.
    pub fn tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `map[prefix + name]`, checking shapes.
    pub fn assign_from(&self, map: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Weights(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Weights(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.copy()?)?;
        }
        let expected = self.vars.len();
        let present = map.keys().filter(|k| k.starts_with(prefix)).count();
        if present != expected {
            return Err(Error::Weights(format!(
                "{present} tensors under prefix '{prefix}', model has {expected}"
            )));
        }
        Ok(())
    }

    /// SHA-256 of all parameter bytes in name order.
    pub fn hash(&self) -> Result<String> {
        let bytes = self
            .vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                let mut b = k.as_bytes().to_vec();
                b.extend(data.iter().flat_map(|x| x.to_le_bytes()));
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(sha256_chunks(bytes.iter().map(Vec::as_slice)))
    }
}

pub fn save_tensors(map: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let map: HashMap<String, Tensor> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
        ));
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
}
