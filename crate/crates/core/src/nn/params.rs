use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{seeded, SeededRng};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-b, b).
    Uniform(f64),
    /// N(0, std²).
    Normal(f64),
}

struct Inner {
    vars: Vec<(String, Var)>,
    rng: SeededRng,
    dtype: DType,
    device: Device,
}

/// Named, seeded parameter store. Cloning shares the store; [`Params::pp`]
/// returns a handle that prefixes every name it creates.
#[derive(Clone)]
pub struct Params {
    inner: Arc<Mutex<Inner>>,
    prefix: String,
}

impl Params {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: Vec::new(),
                rng: seeded(seed),
                dtype,
                device: Device::Cpu,
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Params {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Params {
            inner: self.inner.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.lock().expect("param store poisoned").dtype
    }

    pub fn device(&self) -> Device {
        self.inner.lock().expect("param store poisoned").device.clone()
    }

    pub fn var(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        let shape: Shape = shape.into();
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = self.inner.lock().expect("param store poisoned");
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let v = Var::from_tensor(&t)?;
        inner.vars.push((full, v.clone()));
        Ok(v)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.inner.lock().expect("param store poisoned").vars.clone()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Deep copy of the current parameter values.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.vars()
            .iter()
            .map(|v| Ok(v.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        for (v, t) in self.vars().iter().zip(snapshot) {
            v.set(t)?;
        }
        Ok(())
    }

    /// Flattened parameter values, used to assert bit-identical weights.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for v in self.vars() {
            out.extend(
                v.as_tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?,
            );
        }
        Ok(out)
    }
}
