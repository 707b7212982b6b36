use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Xavier-uniform using the first two dims as fan-in and fan-out.
    Xavier,
    Uniform(f64),
}

/// A named parameter as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn init(&mut self, name: &str, dims: &[usize], init: Init, rng: &mut Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Xavier => {
                let (fan_in, fan_out) = match dims {
                    [a, b, rest @ ..] => {
                        let r: usize = rest.iter().product();
                        (a * r, b * r)
                    }
                    [a] => (*a, *a),
                    [] => (1, 1),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                sample_uniform(a, n, rng)?
            }
            Init::Uniform(a) => sample_uniform(a, n, rng)?,
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
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

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<NamedTensor>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                })
            })
            .collect()
    }

    /// Manifest mismatches between this store and `named`: missing, extra
    /// and reshaped parameters.
    pub fn mismatches(&self, named: &[NamedTensor]) -> Vec<String> {
        let mut out = Vec::new();
        let given: BTreeMap<&str, &NamedTensor> = named.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, v) in &self.vars {
            match given.get(name.as_str()) {
                None => out.push(format!("missing `{name}`")),
                Some(t) if t.shape != v.dims() => {
                    out.push(format!("`{name}` has shape {:?}, expected {:?}", t.shape, v.dims()))
                }
                _ => {}
            }
        }
        for t in named {
            if !self.vars.contains_key(&t.name) {
                out.push(format!("unexpected `{}`", t.name));
            }
        }
        out
    }

    /// Overwrites the listed parameters (must exist with matching shapes).
    pub fn load(&self, named: &[NamedTensor]) -> Result<()> {
        for t in named {
            let v = self
                .vars
                .get(&t.name)
                .ok_or_else(|| Error::Incompatible(vec![format!("unexpected `{}`", t.name)]))?;
            if t.shape != v.dims() || t.data.len() != v.elem_count() {
                return Err(shape(format!("`{}` has shape {:?}, expected {:?}", t.name, t.shape, v.dims())));
            }
            let src = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            v.set(&src)?;
        }
        Ok(())
    }

    /// Loads a full manifest, failing with every mismatch listed.
    pub fn load_exact(&self, named: &[NamedTensor]) -> Result<()> {
        let m = self.mismatches(named);
        if !m.is_empty() {
            return Err(Error::Incompatible(m));
        }
        self.load(named)
    }
}

fn sample_uniform(a: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if a == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let dist = Uniform::new(-a, a).map_err(|e| invalid(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}
