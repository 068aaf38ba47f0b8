use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::params::Params;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are plain tensors keyed by parameter
/// name so the whole optimizer state serializes losslessly.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamCfg,
    t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamCfg) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update to every var in `params` that has a gradient.
    pub fn step(&mut self, params: &Params, grads: &GradStore) -> Result<()> {
        if self.cfg.lr == 0.0 {
            return Ok(());
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(&var) else { continue };
            let g = g.detach();
            let m = match self.m.get(&name) {
                Some(m) => ((m.affine(b1, 0.0)?) + g.affine(1.0 - b1, 0.0)?)?.detach(),
                None => g.affine(1.0 - b1, 0.0)?.detach(),
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v.affine(b2, 0.0)?) + g.sqr()?.affine(1.0 - b2, 0.0)?)?.detach(),
                None => g.sqr()?.affine(1.0 - b2, 0.0)?.detach(),
            };
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let update = (m_hat.affine(self.cfg.lr, 0.0)? / (v_hat.sqrt()? + self.cfg.eps)?)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }

    /// Moment tensors for checkpointing (`m.<name>` / `v.<name>`).
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state_tensors(&mut self, t: usize, map: &HashMap<String, Tensor>) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (key, value) in map {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| Error::contract(format!("malformed optimizer key {key}")))?;
            match kind {
                "m" => self.m.insert(name.to_string(), value.clone()),
                "v" => self.v.insert(name.to_string(), value.clone()),
                _ => return Err(Error::contract(format!("malformed optimizer key {key}"))),
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::{DType, Device};

    #[test]
    fn adam_reduces_quadratic_loss() {
        let p = Params::new(&Device::Cpu, DType::F32, 0, true);
        let w = p.take("w", &[4], Init::Const(2.0)).unwrap();
        let mut opt = Adam::new(AdamCfg {
            lr: 0.1,
            ..Default::default()
        });
        let initial = w.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        let mut last = initial;
        for _ in 0..50 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&p, &grads).unwrap();
            last = loss.to_scalar::<f32>().unwrap();
        }
        assert!(last < 0.2 * initial, "{last} vs {initial}");
        assert_eq!(opt.step_count(), 50);
    }

    #[test]
    fn zero_lr_is_identity() {
        let p = Params::new(&Device::Cpu, DType::F32, 0, true);
        let w = p.take("w", &[4], Init::Normal(1.0)).unwrap();
        let before = w.to_vec1::<f32>().unwrap();
        let mut opt = Adam::new(AdamCfg {
            lr: 0.0,
            ..Default::default()
        });
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&p, &grads).unwrap();
        assert_eq!(before, w.to_vec1::<f32>().unwrap());
        assert_eq!(opt.step_count(), 0);
    }
}
