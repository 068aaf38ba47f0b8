use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Kaiming-normal over fan-in, scaled. LeakyReLU(0.2) gain; `scale` 0.1
    /// is the residual-block convention, 1.0 elsewhere.
    Kaiming {
        fan_in: usize,
        scale: f64,
    },
    /// Uniform in [-bound, bound] with bound = 1/sqrt(fan_in).
    FanInUniform {
        fan_in: usize,
    },
}

/// Derive a per-parameter seed so each named tensor has its own stream.
/// Adding or removing unrelated parameters does not shift anyone else's
/// initialization (FNV-1a over the name, mixed with the store seed).
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn draw(init: Init, dims: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("std >= 0");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Kaiming { fan_in, scale } => {
            // gain for LeakyReLU(0.2): sqrt(2 / (1 + 0.2^2))
            let gain = (2.0 / (1.0 + 0.04f64)).sqrt();
            let std = scale * gain / (fan_in as f64).sqrt();
            let d = Normal::new(0.0, std).expect("std >= 0");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::FanInUniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let d = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    vars: BTreeMap<String, Var>,
    consts: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Var>,
    preload: HashMap<String, Tensor>,
}

/// Named parameter store for one network.
///
/// A trainable store hands out candle `Var`-backed tensors (leaves of the
/// autodiff graph); a frozen store hands out plain constants, so gradient
/// isolation holds by construction. Buffers (BatchNorm running stats,
/// spectral-norm power-iteration vectors) are non-trainable state that is
/// still checkpointed and mutated in place.
#[derive(Debug)]
pub struct Params {
    inner: Mutex<Inner>,
    device: Device,
    dtype: DType,
    seed: u64,
    trainable: bool,
}

impl Params {
    pub fn new(device: &Device, dtype: DType, seed: u64, trainable: bool) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            device: device.clone(),
            dtype,
            seed,
            trainable,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
    pub fn dtype(&self) -> DType {
        self.dtype
    }
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Stage externally provided values (e.g. pretrained weights). Subsequent
    /// `take`/`buffer` calls for these names use the staged value instead of
    /// drawing from the initializer.
    pub fn preload(&self, map: HashMap<String, Tensor>) {
        let mut inner = self.inner.lock().unwrap();
        inner.preload.extend(map);
    }

    fn materialize(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let staged = {
            let mut inner = self.inner.lock().unwrap();
            inner.preload.remove(name)
        };
        let t = match staged {
            Some(t) => {
                if t.dims() != dims {
                    return Err(Error::shape(format!(
                        "preloaded tensor {name} has shape {:?}, expected {:?}",
                        t.dims(),
                        dims
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                let v = draw(init, dims, &mut rng);
                Tensor::from_vec(v, dims, &self.device)?.to_dtype(self.dtype)?
            }
        };
        Ok(t)
    }

    /// Create (or fetch the staged value of) a trainable parameter.
    pub fn take(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        {
            let inner = self.inner.lock().unwrap();
            if inner.vars.contains_key(name) || inner.consts.contains_key(name) {
                return Err(Error::contract(format!("duplicate parameter name {name}")));
            }
        }
        let t = self.materialize(name, dims, init)?;
        let mut inner = self.inner.lock().unwrap();
        if self.trainable {
            let var = Var::from_tensor(&t)?;
            let out = var.as_tensor().clone();
            inner.vars.insert(name.to_string(), var);
            Ok(out)
        } else {
            inner.consts.insert(name.to_string(), t.clone());
            Ok(t)
        }
    }

    /// Create a non-trainable buffer (mutated via `set_buffer`).
    pub fn buffer(&self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        {
            let inner = self.inner.lock().unwrap();
            if inner.buffers.contains_key(name) {
                return Err(Error::contract(format!("duplicate buffer name {name}")));
            }
        }
        let t = self.materialize(name, dims, init)?;
        let var = Var::from_tensor(&t.detach())?;
        let out = var.as_tensor().clone();
        self.inner
            .lock()
            .unwrap()
            .buffers
            .insert(name.to_string(), var);
        Ok(out)
    }

    pub fn set_buffer(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        let var = inner
            .buffers
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown buffer {name}")))?;
        var.set(&value.detach())?;
        Ok(())
    }

    /// Overwrite a parameter value in place (checkpoint restore, tests).
    pub fn set_value(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        if let Some(var) = inner.vars.get(name) {
            var.set(&value.detach())?;
            return Ok(());
        }
        if let Some(var) = inner.buffers.get(name) {
            var.set(&value.detach())?;
            return Ok(());
        }
        Err(Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .or_else(|| inner.consts.get(name).cloned())
            .or_else(|| inner.buffers.get(name).map(|v| v.as_tensor().clone()))
    }

    /// Trainable vars in name order (optimizer traversal order).
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .keys()
            .chain(inner.consts.keys())
            .chain(inner.buffers.keys())
            .cloned()
            .collect()
    }

    /// Total element count over parameters (buffers excluded).
    pub fn num_params(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .values()
            .map(|v| v.as_tensor().elem_count())
            .chain(inner.consts.values().map(|t| t.elem_count()))
            .sum()
    }

    /// Snapshot of all state (parameters and buffers) for serialization.
    /// Buffers are prefixed so the two namespaces cannot collide.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let inner = self.inner.lock().unwrap();
        let mut out = HashMap::new();
        for (k, v) in &inner.vars {
            out.insert(format!("p.{k}"), v.as_tensor().copy().unwrap());
        }
        for (k, t) in &inner.consts {
            out.insert(format!("p.{k}"), t.copy().unwrap());
        }
        for (k, v) in &inner.buffers {
            out.insert(format!("b.{k}"), v.as_tensor().copy().unwrap());
        }
        out
    }

    /// Restore a snapshot produced by `state_tensors`. Every entry must match
    /// an existing parameter or buffer; missing and extra names are errors.
    pub fn load_state_tensors(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        let expected: usize = {
            let inner = self.inner.lock().unwrap();
            inner.vars.len() + inner.consts.len() + inner.buffers.len()
        };
        if map.len() != expected {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model expects {expected}",
                map.len()
            )));
        }
        for (key, value) in map {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| Error::contract(format!("malformed state key {key}")))?;
            match kind {
                "p" => {
                    let inner = self.inner.lock().unwrap();
                    if let Some(var) = inner.vars.get(name) {
                        var.set(&value.to_dtype(self.dtype)?)?;
                    } else if inner.consts.contains_key(name) {
                        drop(inner);
                        let mut inner = self.inner.lock().unwrap();
                        inner
                            .consts
                            .insert(name.to_string(), value.to_dtype(self.dtype)?);
                    } else {
                        return Err(Error::contract(format!("unexpected parameter {name}")));
                    }
                }
                "b" => self.set_buffer(name, &value.to_dtype(self.dtype)?)?,
                _ => return Err(Error::contract(format!("malformed state key {key}"))),
            }
        }
        Ok(())
    }

    /// Global L2 norm over the gradients of this store's trainable vars.
    pub fn grad_norm(&self, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        let inner = self.inner.lock().unwrap();
        let mut acc = 0f64;
        for var in inner.vars.values() {
            if let Some(g) = grads.get(var) {
                acc += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Params::new(&cpu(), DType::F32, 7, true);
        let b = Params::new(&cpu(), DType::F32, 7, true);
        let ta = a.take("w", &[4, 3], Init::Normal(1.0)).unwrap();
        let tb = b.take("w", &[4, 3], Init::Normal(1.0)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn per_name_streams_are_independent() {
        // Creating an unrelated parameter first must not shift `w`.
        let a = Params::new(&cpu(), DType::F32, 7, true);
        let _ = a.take("other", &[10], Init::Normal(1.0)).unwrap();
        let ta = a.take("w", &[4, 3], Init::Normal(1.0)).unwrap();
        let b = Params::new(&cpu(), DType::F32, 7, true);
        let tb = b.take("w", &[4, 3], Init::Normal(1.0)).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn frozen_store_has_no_vars() {
        let p = Params::new(&cpu(), DType::F32, 0, false);
        let _ = p.take("w", &[2, 2], Init::Ones).unwrap();
        assert!(p.vars().is_empty());
        assert_eq!(p.num_params(), 4);
    }

    #[test]
    fn duplicate_name_rejected() {
        let p = Params::new(&cpu(), DType::F32, 0, true);
        let _ = p.take("w", &[2], Init::Zeros).unwrap();
        assert!(p.take("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn state_roundtrip_bitwise() {
        let p = Params::new(&cpu(), DType::F32, 3, true);
        let _ = p.take("w", &[8], Init::Normal(0.5)).unwrap();
        let _ = p.buffer("bn.mean", &[4], Init::Zeros).unwrap();
        let snap = p.state_tensors();

        let q = Params::new(&cpu(), DType::F32, 99, true);
        let _ = q.take("w", &[8], Init::Normal(0.5)).unwrap();
        let _ = q.buffer("bn.mean", &[4], Init::Zeros).unwrap();
        q.load_state_tensors(&snap).unwrap();
        let w_p = p.get("w").unwrap().to_vec1::<f32>().unwrap();
        let w_q = q.get("w").unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            w_p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            w_q.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
