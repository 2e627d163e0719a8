use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip applied per call to [`AdamW::step`]; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name so
/// they can be checkpointed and restored exactly.
///
/// Parameters without a gradient in the store are skipped entirely: no
/// moment update and no decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

/// Serializable optimizer state.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub tensors: BTreeMap<String, Tensor>,
    pub steps: BTreeMap<String, u64>,
}

pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in params {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += super::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Scales gradients of `params` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[(String, Var)], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(params, grads)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for (_, var) in params {
            if let Some(g) = grads.remove(var.as_tensor()) {
                grads.insert(var.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// One update of `params` at learning rate `lr`. Returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, params: &[(String, Var)], grads: &mut GradStore, lr: f64) -> Result<f64> {
        let norm = match self.config.clip_norm {
            Some(c) => clip_grad_norm(params, grads, c)?,
            None => grad_norm(params, grads)?,
        };
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.to_dtype(var.dtype())?;
            let entry = match self.state.remove(name) {
                Some(e) => e,
                None => Moments {
                    m: var.as_tensor().zeros_like()?.detach(),
                    v: var.as_tensor().zeros_like()?.detach(),
                    steps: 0,
                },
            };
            let steps = entry.steps + 1;
            let m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let bc1 = 1.0 - beta1.powi(steps as i32);
            let bc2 = 1.0 - beta2.powi(steps as i32);
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * weight_decay))?;
            var.set(&(decayed - (update * lr)?)?.detach())?;
            self.state.insert(name.clone(), Moments { m, v, steps });
        }
        Ok(norm)
    }

    pub fn export(&self) -> AdamWState {
        let mut out = AdamWState::default();
        for (name, s) in &self.state {
            out.tensors.insert(format!("m.{name}"), s.m.clone());
            out.tensors.insert(format!("v.{name}"), s.v.clone());
            out.steps.insert(name.clone(), s.steps);
        }
        out
    }

    pub fn import(&mut self, state: &AdamWState) -> Result<()> {
        self.state.clear();
        for (name, &steps) in &state.steps {
            let get = |k: String| {
                state
                    .tensors
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| crate::Error::data(format!("optimizer state missing {k}")))
            };
            self.state.insert(
                name.clone(),
                Moments {
                    m: get(format!("m.{name}"))?,
                    v: get(format!("v.{name}"))?,
                    steps,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn matches_closed_form_first_step() {
        // With zero moments, the first bias-corrected step moves each element by
        // lr * g / (|g| + eps) after decay.
        let w = Var::from_vec(vec![1.0f64, -2.0], 2, &crate::nn::device()).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let mut grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            clip_norm: None,
            ..Default::default()
        });
        opt.step(&params, &mut grads, 0.1).unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        for (g0, x0) in got.iter().zip([1.0f64, -2.0]) {
            let expected = x0 * (1.0 - 0.1 * 0.01) - 0.1 * x0 / (x0.abs() + 1e-8);
            assert!((g0 - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn skips_params_without_grad() {
        let a = Var::from_vec(vec![1.0f32], 1, &crate::nn::device()).unwrap();
        let b = Var::from_vec(vec![3.0f32], 1, &crate::nn::device()).unwrap();
        let params = vec![("a".into(), a.clone()), ("b".into(), b.clone())];
        let mut grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&params, &mut grads, 0.5).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![3.0]);
        assert_ne!(a.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0]);
        assert_eq!(a.dtype(), DType::F32);
    }

    #[test]
    fn clipping_bounds_norm() {
        let a = Var::from_vec(vec![3.0f64, 4.0], 2, &crate::nn::device()).unwrap();
        let params = vec![("a".to_string(), a.clone())];
        let loss = (a.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let mut grads = loss.backward().unwrap();
        let before = clip_grad_norm(&params, &mut grads, 1.0).unwrap();
        assert!((before - 5.0).abs() < 1e-12);
        assert!(grad_norm(&params, &grads).unwrap() <= 1.0);
    }
}
