//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

/// Only matrix and kernel weights decay; biases, norm affines, class token
/// and position embeddings do not.
pub fn decays(name: &str, var: &Var) -> bool {
    name.ends_with(".weight") && var.rank() >= 2
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn grad_norm(params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for var in params.values() {
            if let Some(g) = grads.get(var) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64) -> Result<f64> {
        let c = self.config;
        let norm = Self::grad_norm(params, grads)?;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (&g2 * (1.0 - c.beta2))?)?,
                None => (&g2 * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let mut update = (m_hat / denom)?;
            let theta = var.as_tensor();
            if c.weight_decay > 0.0 && decays(name, var) {
                update = (update + (theta * c.weight_decay)?)?;
            }
            var.set(&(theta - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_matches_hand_computation() {
        let w = Var::from_tensor(&Tensor::new(&[[1.0f64, -2.0]], &Device::Cpu).unwrap()).unwrap();
        let mut params = BTreeMap::new();
        params.insert("l.weight".to_string(), w.clone());
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { clip_norm: 0.0, ..Default::default() });
        opt.step(&params, &grads, 0.1).unwrap();
        // m_hat = g, v_hat = g^2 => update = g / (|g| + eps) + wd * theta
        let got: Vec<Vec<f64>> = w.as_tensor().to_vec2().unwrap();
        let expect = |th: f64| th - 0.1 * (3.0 / (3.0 + 1e-8) + 0.05 * th);
        assert!((got[0][0] - expect(1.0)).abs() < 1e-12);
        assert!((got[0][1] - expect(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let w = Var::zeros((4,), DType::F64, &Device::Cpu).unwrap();
        let mut params = BTreeMap::new();
        params.insert("b".to_string(), w.clone());
        let loss = (w.as_tensor() * 10.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!((AdamW::grad_norm(&params, &grads).unwrap() - 20.0).abs() < 1e-12);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&params, &grads, 1.0).unwrap();
        let m: Vec<f64> = opt.m["b"].to_vec1().unwrap();
        let clipped = 10.0 / (20.0 + 1e-6);
        assert!(m.iter().all(|x| (x - 0.1 * clipped).abs() < 1e-12));
    }

    #[test]
    fn decay_selection() {
        let d = Device::Cpu;
        let mat = Var::zeros((2, 2), DType::F32, &d).unwrap();
        let vec = Var::zeros((2,), DType::F32, &d).unwrap();
        assert!(decays("a.weight", &mat));
        assert!(!decays("a.bias", &vec));
        assert!(!decays("a.norm.weight", &vec));
        assert!(!decays("transformer.pos_embed", &mat));
    }
}
