//! Parameter storage with seeded, order-independent initialization.
//!
//! candle's CPU device cannot be seeded, so parameters are drawn from a
//! ChaCha stream keyed by `(seed, parameter name)`. The same seed therefore
//! yields the same weights no matter in which order modules are built.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Deterministic stream for a `(seed, key)` pair.
pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    // FNV-1a: fixed across platforms and toolchains, unlike std's hasher.
    let mut fnv: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        fnv ^= u64::from(*b);
        fnv = fnv.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key_seed = [0u8; 32];
    key_seed[..8].copy_from_slice(&seed.to_le_bytes());
    key_seed[8..16].copy_from_slice(&fnv.to_le_bytes());
    ChaCha8Rng::from_seed(key_seed)
}

/// Samples `shape` values from N(0, 1) with a seeded stream.
pub fn randn(shape: impl Into<Shape>, seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Samples `shape` values uniformly from `[lo, hi)` with a seeded stream.
pub fn uniform(
    shape: impl Into<Shape>,
    lo: f64,
    hi: f64,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.elem_count())
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

fn sample_init(shape: &Shape, init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
        (0..n)
            .map(|_| lo + (up - lo) * rng.random::<f64>())
            .collect()
    };
    match init {
        Init::Const(c) => vec![c; n],
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape).max(1);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Normal => normal(rng, 0.0, std),
                NormalOrUniform::Uniform => {
                    let b = 3f64.sqrt() * std;
                    uniform(rng, -b, b)
                }
            }
        }
    }
}

struct SeededBackend {
    vars: VarMap,
    seed: u64,
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut map = self.vars.data().lock().expect("parameter map poisoned");
        if let Some(v) = map.get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    v.shape(),
                    s
                );
            }
            return Ok(v.as_tensor().clone());
        }
        let mut rng = keyed_rng(self.seed, name);
        let values = sample_init(&s, h, &mut rng);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        map.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(
        &self,
        name: &str,
        _dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let map = self.vars.data().lock().expect("parameter map poisoned");
        match map.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars
            .data()
            .lock()
            .expect("parameter map poisoned")
            .contains_key(name)
    }
}

/// Named trainable parameters of a model.
#[derive(Clone)]
pub struct Params {
    vars: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for Params {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Params")
            .field("count", &self.len())
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl Params {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: VarMap::new(),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    /// Builder that creates missing parameters from the seeded stream.
    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(SeededBackend {
                vars: self.vars.clone(),
                seed: self.seed,
            }),
            self.dtype,
            self.device.clone(),
        )
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

    pub fn len(&self) -> usize {
        self.vars
            .data()
            .lock()
            .expect("parameter map poisoned")
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = self
            .vars
            .data()
            .lock()
            .expect("parameter map poisoned")
            .keys()
            .cloned()
            .collect();
        n.sort();
        n
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.vars
            .data()
            .lock()
            .expect("parameter map poisoned")
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Variables whose names start with any of `prefixes` (all when empty),
    /// sorted by name.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        let map = self.vars.data().lock().expect("parameter map poisoned");
        let mut out: Vec<(String, Var)> = map
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars
            .data()
            .lock()
            .expect("parameter map poisoned")
            .get(name)
            .cloned()
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                expected: var.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let vars = self.vars_with_prefix(&[prefix]);
        for (_, v) in &vars {
            v.set(&v.as_tensor().zeros_like()?)?;
        }
        Ok(vars.len())
    }

    /// Deep copy of all values, untracked and sorted by name. Later
    /// optimizer steps do not affect it.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let map = self.vars.data().lock().expect("parameter map poisoned");
        let mut out = BTreeMap::new();
        for (k, v) in map.iter() {
            out.insert(k.clone(), v.as_tensor().copy()?.detach());
        }
        Ok(out)
    }

    /// Loads every parameter present in `values`; returns the names of own
    /// parameters that `values` did not provide.
    pub fn load_matching(&self, values: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        for (name, var) in self.vars_with_prefix(&[]) {
            match values.get(&name) {
                Some(t) => {
                    if t.shape() != var.shape() {
                        return Err(Error::ShapeMismatch {
                            expected: var.dims().to_vec(),
                            actual: t.dims().to_vec(),
                        });
                    }
                    var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                }
                None => missing.push(name),
            }
        }
        Ok(missing)
    }
}
