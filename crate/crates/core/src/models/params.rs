//! Named parameter storage with deterministic, name-keyed initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_from, Stream};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given std, truncated at two standard deviations.
    TruncNormal(f64),
    /// He-normal for ReLU networks: std = sqrt(2 / fan).
    Kaiming { fan: usize },
    Uniform(f64),
}

/// Trainable parameters and non-trainable buffers, keyed by dotted name.
///
/// Initial values depend only on `(seed, name)`, so two stores built with the
/// same seed hold identical tensors regardless of construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            seed,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn fill(&self, name: &str, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = rng_from(&[Stream::Init as u64, self.seed, hash_str(name)]);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::TruncNormal(_) | Init::Kaiming { .. } => {
                let std = match init {
                    Init::Kaiming { fan } => (2.0 / fan.max(1) as f64).sqrt(),
                    Init::TruncNormal(std) => std,
                    _ => unreachable!(),
                };
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
            Init::Uniform(bound) => {
                let u = Uniform::new_inclusive(-bound, bound).expect("bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the parameter `name`, creating it on first use. Reusing a name
    /// with a different shape is an error.
    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let shape = shape.into();
        if let Some(v) = self.params.get(name) {
            if v.shape() != &shape {
                return Err(Error::Config(format!(
                    "parameter `{name}` requested as {shape:?} but exists as {:?}",
                    v.shape()
                )));
            }
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.fill(name, &shape, init)?)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        let shape = shape.into();
        if let Some(v) = self.buffers.get(name) {
            return Ok(v.clone());
        }
        let var = Var::from_tensor(&self.fill(name, &shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer in place; every layer holding it sees the change.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, checkpoint holds {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(3, DType::F64, Device::Cpu);
        let mut b = ParamStore::new(3, DType::F64, Device::Cpu);
        let a1 = a.param("x.weight", (4, 4), Init::TruncNormal(0.02)).unwrap();
        let _ = a.param("y.weight", (4, 4), Init::TruncNormal(0.02)).unwrap();
        let _ = b.param("y.weight", (4, 4), Init::TruncNormal(0.02)).unwrap();
        let b1 = b.param("x.weight", (4, 4), Init::TruncNormal(0.02)).unwrap();
        let va: Vec<f64> = a1.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = b1.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn reuse_shares_storage_and_checks_shape() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        let a = s.param("w", 3, Init::Zeros).unwrap();
        let b = s.param("w", 3, Init::Ones).unwrap();
        s.assign("w", &Tensor::new(&[1f32, 2., 3.], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), vec![1., 2., 3.]);
        assert_eq!(b.to_vec1::<f32>().unwrap(), vec![1., 2., 3.]);
        assert!(s.param("w", 4, Init::Zeros).is_err());
    }
}
