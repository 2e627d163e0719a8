use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ensure_finite;
use crate::seed;

/// Conditioning: per-frame class ids `[B, T]` (u32) and a prompt `[B, T, D]`
/// holding the visible part of the target (zeros where generated).
#[derive(Debug, Clone)]
pub struct Cond {
    pub classes: Tensor,
    pub prompt: Tensor,
}

impl Cond {
    /// The fully dropped condition: null classes, empty prompt.
    pub fn null(&self, null_class: u32) -> Result<Self> {
        Ok(Self {
            classes: (self.classes.ones_like()? * f64::from(null_class))?,
            prompt: self.prompt.zeros_like()?,
        })
    }
}

/// Anything that predicts a velocity for `x` at per-example times `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Cond) -> Result<Tensor>;
    fn null_class(&self) -> u32;
}

/// One flow-matching training batch.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    /// Clean targets `[B, T, D]`, already normalized.
    pub x1: Tensor,
    /// Noise of the same shape.
    pub x0: Tensor,
    /// Per-example interpolation time.
    pub t: Vec<f64>,
    pub cond: Cond,
    /// `[B, T]`, 1 where the loss applies (the infilled span).
    pub mask: Option<Tensor>,
}

impl FlowBatch {
    /// `(1 - t) x0 + t x1` per example.
    pub fn x_t(&self) -> Result<Tensor> {
        let b = self.x1.dim(0)?;
        let t = Tensor::from_vec(self.t.clone(), (b, 1, 1), self.x1.device())?.to_dtype(self.x1.dtype())?;
        let one_minus = (t.ones_like()? - &t)?;
        Ok((self.x0.broadcast_mul(&one_minus)? + self.x1.broadcast_mul(&t)?)?)
    }

    pub fn target(&self) -> Result<Tensor> {
        Ok((&self.x1 - &self.x0)?)
    }
}

/// Mean squared velocity error, over the masked frames when a mask is given.
pub fn cfm_loss(model: &dyn VelocityField, batch: &FlowBatch) -> Result<Tensor> {
    let pred = model.velocity(&batch.x_t()?, &batch.t, &batch.cond)?;
    let err = (pred - batch.target()?)?.sqr()?;
    let loss = match &batch.mask {
        None => err.mean_all()?,
        Some(m) => {
            let d = err.dim(2)? as f64;
            let m = m.to_dtype(err.dtype())?;
            let denom = crate::nn::scalar(&m.sum_all()?)? * d;
            if denom <= 0.0 {
                return Err(Error::data("infilling mask selects no frames"));
            }
            (err.broadcast_mul(&m.unsqueeze(2)?)?.sum_all()? / denom)?
        }
    };
    ensure_finite(&loss, "flow-matching loss")?;
    Ok(loss)
}

/// Which examples have their condition dropped, each with probability `p`.
pub fn condition_drop(rng: &mut impl Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p.clamp(0.0, 1.0))).collect()
}

/// A contiguous span covering a uniform `ratio` in `range` of `t` frames
/// (at least one), as a 0/1 mask with 1 on the span.
pub fn infill_mask(rng: &mut impl Rng, t: usize, range: (f64, f64)) -> Vec<f32> {
    let ratio = rng.random_range(range.0..=range.1);
    let len = ((ratio * t as f64).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - len);
    (0..t).map(|i| if (start..start + len).contains(&i) { 1.0 } else { 0.0 }).collect()
}

/// Standard-normal tensor from `seed`.
pub fn gaussian(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = seed::rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &crate::nn::device())?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            guidance: 2.0,
            seed: 0,
        }
    }
}

/// Euler integration of the velocity field from noise at t=0 to t=1, with
/// classifier-free guidance `v_u + g (v_c - v_u)`. The unconditional pass is
/// skipped when `g == 1`. Output stays in the model's normalized space.
pub fn sample(model: &dyn VelocityField, cond: &Cond, shape: &[usize], cfg: &SamplerConfig, dtype: DType) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let b = shape[0];
    let mut x = gaussian(shape, cfg.seed, dtype)?;
    let null = if cfg.guidance != 1.0 {
        Some(cond.null(model.null_class())?)
    } else {
        None
    };
    let dt = 1.0 / cfg.steps as f64;
    for i in 0..cfg.steps {
        let t = vec![i as f64 * dt; b];
        let v_c = model.velocity(&x, &t, cond)?;
        let v = match &null {
            Some(nc) => {
                let v_u = model.velocity(&x, &t, nc)?;
                (&v_u + ((v_c - &v_u)? * cfg.guidance)?)?
            }
            None => v_c,
        };
        x = (x + (v * dt)?)?.detach();
    }
    ensure_finite(&x, "sampled sequence")?;
    Ok(x)
}
