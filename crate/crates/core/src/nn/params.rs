//! Named parameter storage with seeded, order-independent initialization.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// U(-b, b) with b = 1/sqrt(fan_in), the usual conv/linear default.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

enum Source {
    Fresh { seed: u64, created: RefCell<BTreeMap<String, Var>> },
    Frozen(TensorMap),
    Trainable(BTreeMap<String, Var>),
}

/// Hands out parameters by hierarchical name.
///
/// Fresh parameters are drawn from a stream keyed on `(seed, name)`, so the
/// construction order of a model never changes its initial weights.
pub struct ParamSource {
    source: Source,
    dtype: DType,
}

impl ParamSource {
    pub fn fresh(seed: u64, dtype: DType) -> Self {
        Self { source: Source::Fresh { seed, created: RefCell::new(BTreeMap::new()) }, dtype }
    }

    /// Plain tensors: the model built from these is not differentiated w.r.t. its weights.
    pub fn frozen(map: TensorMap, dtype: DType) -> Self {
        Self { source: Source::Frozen(map), dtype }
    }

    pub fn trainable(store: &ParamStore) -> Self {
        let dtype = store.vars.values().next().map(|v| v.dtype()).unwrap_or(DType::F32);
        Self { source: Source::Trainable(store.vars.clone()), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Builder<'_> {
        Builder { src: self, prefix: String::new() }
    }

    /// Parameters created so far by a fresh source.
    pub fn into_store(self) -> Result<ParamStore> {
        match self.source {
            Source::Fresh { created, .. } => Ok(ParamStore { vars: created.into_inner() }),
            Source::Trainable(vars) => Ok(ParamStore { vars }),
            Source::Frozen(map) => ParamStore::from_tensors(&map, self.dtype),
        }
    }

    fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let check = |t: &Tensor| -> Result<()> {
            if t.dims() != shape {
                return Err(LabError::shape(format!("parameter {name}: expected {shape:?}, found {:?}", t.dims())));
            }
            Ok(())
        };
        match &self.source {
            Source::Fresh { seed, created } => {
                let t = sample_init(*seed, name, shape, init, self.dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                if created.borrow_mut().insert(name.to_string(), var).is_some() {
                    return Err(LabError::config(format!("duplicate parameter name {name}")));
                }
                Ok(out)
            }
            Source::Frozen(map) => {
                let t = map.get(name).ok_or_else(|| LabError::MissingInput(format!("parameter {name}")))?;
                check(t)?;
                Ok(t.to_dtype(self.dtype)?.detach())
            }
            Source::Trainable(vars) => {
                let v = vars.get(name).ok_or_else(|| LabError::MissingInput(format!("parameter {name}")))?;
                check(v.as_tensor())?;
                Ok(v.as_tensor().clone())
            }
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn sample_init(seed: u64, name: &str, shape: &[usize], init: Init, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::FanInUniform { fan_in } => {
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        }
        Init::Normal { std } => (0..n).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
    };
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct Builder<'a> {
    src: &'a ParamSource,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn pp(&self, s: impl std::fmt::Display) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() { s.to_string() } else { format!("{}.{s}", self.prefix) };
        Builder { src: self.src, prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.src.get(&self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.src.dtype
    }
}

/// Trainable parameters keyed by name.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn from_tensors(map: &TensorMap, dtype: DType) -> Result<Self> {
        let vars = map
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(&t.to_dtype(dtype)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self { vars })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
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

    /// Detached snapshot of the current values.
    pub fn snapshot(&self) -> Result<TensorMap> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach()))).collect()
    }

    /// Overwrites every variable from `map` (names and shapes must match).
    pub fn load(&self, map: &TensorMap) -> Result<()> {
        for (k, v) in &self.vars {
            let t = map.get(k).ok_or_else(|| LabError::MissingInput(format!("parameter {k}")))?;
            if t.dims() != v.dims() {
                return Err(LabError::shape(format!("parameter {k}: expected {:?}, found {:?}", v.dims(), t.dims())));
            }
            v.set(&t.to_dtype(v.dtype())?)?;
        }
        Ok(())
    }
}

/// Order-sensitive FNV checksum over the raw bits of every tensor in the map.
pub fn checksum(map: &TensorMap) -> Result<u64> {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (k, t) in map {
        feed(k.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    Ok(h)
}
