use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// Parameter initializers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

/// Named trainable tensors with deterministic, seeded initialization.
///
/// Names are unique within a store and iterate in sorted order, which fixes
/// the order of optimizer updates, digests and checkpoint tables.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.vars.borrow().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: super::device(),
            dtype,
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(seed::rng(seed)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&self, name: &str) -> Scope<'_> {
        self.root().pp(name)
    }

    pub fn len(&self) -> usize {
        self.vars.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.borrow().is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    /// `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Snapshot of current values (fresh storage, detached from training).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Independent copy: new storage for every tensor, same names and values.
    pub fn deep_clone(&self, seed: u64) -> Result<Self> {
        let out = Self::new(seed, self.dtype);
        for (k, v) in self.vars.borrow().iter() {
            let t = v.as_tensor().copy()?.detach();
            out.vars.borrow_mut().insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// Overwrites existing parameters in place from `tensors`. With `strict`,
    /// every parameter must be present in the map.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.vars.borrow().iter() {
            match tensors.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(Error::data(format!(
                            "parameter {name}: shape {:?} does not match {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
                None if strict => {
                    return Err(Error::data(format!("missing parameter {name}")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Adds (or replaces) a parameter holding a copy of `t`.
    pub fn insert(&self, name: &str, t: &Tensor) -> Result<()> {
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?.copy()?.detach())?;
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(())
    }

    /// Copies every parameter under `src_prefix` in `src` onto the matching
    /// name under `dst_prefix` here. Returns the number of tensors copied.
    pub fn copy_prefix(&self, src: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in src.vars() {
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            let dst_name = format!("{dst_prefix}{rest}");
            let dst = self.get(&dst_name).ok_or_else(|| {
                Error::config(format!("no destination parameter {dst_name} for {name}"))
            })?;
            if dst.dims() != var.dims() {
                return Err(Error::config(format!(
                    "width mismatch copying {name} {:?} onto {dst_name} {:?}",
                    var.dims(),
                    dst.dims()
                )));
            }
            dst.set(&var.as_tensor().to_dtype(self.dtype)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw little-endian bytes.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.borrow().iter() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(h.finalize().into())
    }

    fn create(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        self.create_with(name, shape, |rng, n| match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        })
    }

    fn create_with(
        &self,
        name: String,
        shape: Shape,
        init: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>,
    ) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(&name) {
            if v.shape() != &shape {
                return Err(Error::config(format!(
                    "parameter {name} requested with shape {shape:?}, exists as {:?}",
                    v.shape()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.elem_count();
        let values = init(&mut self.rng.borrow_mut(), n);
        if values.len() != n {
            return Err(Error::config(format!("initial values for {name} have {} entries, need {n}", values.len())));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(out)
    }
}

/// Raw little-endian bytes of a tensor (f32/f64/u32 supported).
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        other => return Err(Error::internal(format!("unsupported dtype {other:?}"))),
    })
}

/// Hierarchical naming handle into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &'a Device {
        &self.store.device
    }

    pub fn get(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape.into(), init)
    }

    /// Like [`Scope::get`], but a newly created parameter starts at `values`.
    pub fn get_values(&self, name: &str, shape: impl Into<Shape>, values: Vec<f64>) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create_with(full, shape.into(), |_, _| values)
    }
}
