use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters with seeded initialization.
///
/// candle's own initializers draw from an unseeded RNG on CPU; creating the
/// variables here keeps a run reproducible from its seed.
pub struct Params {
    map: VarMap,
    rng: Mutex<ChaCha8Rng>,
    device: Device,
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl Params {
    pub fn new(seed: u64) -> Self {
        Params {
            map: VarMap::new(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var_map(&self) -> &VarMap {
        &self.map
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            params: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = {
            let mut rng = self.rng.lock().expect("rng lock");
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        // Box-Muller
                        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.random();
                        (std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
                            as f32
                    })
                    .collect(),
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let tensor = var.as_tensor().clone();
        let mut data = self.map.data().lock().expect("varmap lock");
        if data.insert(name.to_string(), var).is_some() {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        Ok(tensor)
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        let data = self.map.data().lock().expect("varmap lock");
        let mut named: Vec<(&String, &Var)> =
            data.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.map.save(path)?;
        Ok(())
    }

    /// Overwrites every registered variable with the value stored in `path`.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        self.map.load(path)?;
        Ok(())
    }

    /// Copies values from `other` for every name present in both.
    pub fn copy_from(&self, other: &Params) -> Result<()> {
        let src = other.map.data().lock().expect("varmap lock");
        let dst = self.map.data().lock().expect("varmap lock");
        for (name, var) in dst.iter() {
            if let Some(s) = src.get(name) {
                var.set(s.as_tensor())?;
            }
        }
        Ok(())
    }

    /// Sets every variable under `to` to the value of its counterpart under `from`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<()> {
        let data = self.map.data().lock().expect("varmap lock");
        for (name, var) in data.iter().filter(|(k, _)| k.starts_with(to)) {
            let src_name = format!("{from}{}", &name[to.len()..]);
            let src = data
                .get(&src_name)
                .ok_or_else(|| Error::invalid(format!("no parameter {src_name} to copy into {name}")))?;
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// SHA-256 over sorted `(name, shape, little-endian f32 values)`.
    pub fn weight_hash(&self, prefix: &str) -> Result<String> {
        let data = self.map.data().lock().expect("varmap lock");
        let sorted: BTreeMap<&String, &Var> =
            data.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let mut h = Sha256::new();
        for (name, var) in sorted {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn num_parameters(&self) -> usize {
        self.all_vars().iter().map(|v| v.elem_count()).sum()
    }
}

/// A name prefix into a [`Params`] store.
#[derive(Clone)]
pub struct Scope<'a> {
    params: &'a Params,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        Scope {
            params: self.params,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.params.get(&format!("{}.{}", self.prefix, name), shape, init)
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }
}
