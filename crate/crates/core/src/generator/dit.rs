use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::cfm::{Cond, VelocityField};
use crate::error::{Error, Result};
use crate::nn::{normalize_last, DepthwiseConv, FeedForward, Init, Linear, MultiHeadAttention, Padding, ParamStore, Scope};

/// Width of the sinusoidal time features fed to the time MLP.
const TIME_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pos_kernel: usize,
    /// Channels of the modeled sequence.
    pub target_dim: usize,
    /// Content classes; index `n_classes` is the null (dropped) condition.
    pub n_classes: usize,
    pub cond_drop: f64,
    /// Zero-initialize modulation and output layers (adaLN-zero).
    pub zero_init: bool,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 8,
            heads: 4,
            ffn_mult: 2,
            pos_kernel: 5,
            target_dim: 32,
            n_classes: 8,
            cond_drop: 0.1,
            zero_init: true,
        }
    }
}

impl DiTConfig {
    pub fn paper_scale(target_dim: usize, n_classes: usize) -> Self {
        Self {
            width: 1024,
            depth: 22,
            heads: 16,
            target_dim,
            n_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.target_dim == 0 || self.n_classes == 0 {
            return Err(Error::config("DiT sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::config(format!("condition drop {} outside [0, 1]", self.cond_drop)));
        }
        Ok(())
    }
}

/// `x * (1 + scale) + shift` with per-example `[B, W]` modulation.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let scale = (scale.unsqueeze(1)? + 1.0)?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

#[derive(Debug, Clone)]
struct DiTBlock {
    pos: DepthwiseConv,
    ada: Linear,
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl DiTBlock {
    fn new(s: &Scope, cfg: &DiTConfig) -> Result<Self> {
        let w = cfg.width;
        let ada = if cfg.zero_init {
            Linear::with_init(&s.pp("ada"), w, 6 * w, Init::Zeros, Init::Zeros)?
        } else {
            Linear::new(&s.pp("ada"), w, 6 * w)?
        };
        Ok(Self {
            pos: DepthwiseConv::new(&s.pp("pos"), w, cfg.pos_kernel, Padding::Same)?,
            ada,
            attn: MultiHeadAttention::new(&s.pp("attn"), w, cfg.heads, false)?,
            ffn: FeedForward::new(&s.pp("ffn"), w, w * cfg.ffn_mult)?,
        })
    }

    fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let x = (x + self.pos.forward(x)?)?;
        let m = self.ada.forward(&c.silu()?)?.chunk(6, D::Minus1)?;
        let h = modulate(&normalize_last(&x, 1e-6)?, &m[0], &m[1])?;
        let x = (&x + self.attn.forward(&h)?.broadcast_mul(&m[2].unsqueeze(1)?)?)?;
        let h = modulate(&normalize_last(&x, 1e-6)?, &m[3], &m[4])?;
        Ok((&x + self.ffn.forward(&h)?.broadcast_mul(&m[5].unsqueeze(1)?)?)?)
    }
}

/// Transformer velocity network with adaptive layer-norm time conditioning.
pub struct DiT {
    pub config: DiTConfig,
    pub store: ParamStore,
    input: Linear,
    class_emb: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<DiTBlock>,
    final_ada: Linear,
    output: Linear,
}

impl std::fmt::Debug for DiT {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiT").field("config", &self.config).finish()
    }
}

/// Sinusoidal features of `t` in `[0, 1]` (scaled by 1000), `[B, 64]`.
pub fn time_features(t: &[f64], dtype: DType) -> Result<Tensor> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            out.push((1000.0 * ti * freq).cos());
        }
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            out.push((1000.0 * ti * freq).sin());
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), TIME_FEATURES), &crate::nn::device())?.to_dtype(dtype)?)
}

impl DiT {
    pub fn new(config: DiTConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_store(config, ParamStore::new(seed, dtype))
    }

    pub fn from_store(config: DiTConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let s = store.root();
        let w = config.width;
        let d = config.target_dim;
        let (zw, zb) = if config.zero_init {
            (Init::Zeros, Init::Zeros)
        } else {
            let b = 1.0 / (w as f64).sqrt();
            (Init::Uniform(b), Init::Uniform(b))
        };
        let blocks = (0..config.depth)
            .map(|i| DiTBlock::new(&s.pp("blocks").pp(i), &config))
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Linear::new(&s.pp("input"), 2 * d, w)?,
            class_emb: s.get("class_emb", (config.n_classes + 1, w), Init::Normal(0.02 * (w as f64).sqrt()))?,
            time_in: Linear::new(&s.pp("time.0"), TIME_FEATURES, w)?,
            time_out: Linear::new(&s.pp("time.1"), w, w)?,
            blocks,
            final_ada: Linear::with_init(&s.pp("final.ada"), w, 2 * w, zw, zb)?,
            output: Linear::with_init(&s.pp("final.out"), w, d, zw, zb)?,
            config,
            store,
        })
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

impl VelocityField for DiT {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Cond) -> Result<Tensor> {
        let (b, tt, d) = x.dims3()?;
        if d != self.config.target_dim {
            return Err(Error::config(format!("DiT models {}-dim targets, got {d}", self.config.target_dim)));
        }
        if t.len() != b {
            return Err(Error::internal(format!("{} times for a batch of {b}", t.len())));
        }
        let emb = self
            .class_emb
            .index_select(&cond.classes.flatten_all()?, 0)?
            .reshape((b, tt, self.config.width))?;
        let h = (self.input.forward(&Tensor::cat(&[x, &cond.prompt], 2)?)? + emb)?;
        let c = self
            .time_out
            .forward(&self.time_in.forward(&time_features(t, x.dtype())?)?.silu()?)?;
        let mut h = h;
        for blk in &self.blocks {
            h = blk.forward(&h, &c)?;
        }
        let m = self.final_ada.forward(&c.silu()?)?.chunk(2, D::Minus1)?;
        let h = modulate(&normalize_last(&h, 1e-6)?, &m[0], &m[1])?;
        self.output.forward(&h)
    }

    fn null_class(&self) -> u32 {
        self.config.n_classes as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(b: usize, t: usize, d: usize, class: u32) -> Cond {
        let dev = crate::nn::device();
        Cond {
            classes: Tensor::from_vec(vec![class; b * t], (b, t), &dev).unwrap(),
            prompt: Tensor::zeros((b, t, d), DType::F32, &dev).unwrap(),
        }
    }

    #[test]
    fn zero_init_outputs_zero_velocity() {
        let cfg = DiTConfig {
            width: 16,
            depth: 2,
            heads: 2,
            target_dim: 3,
            n_classes: 4,
            ..Default::default()
        };
        let m = DiT::new(cfg, 0, DType::F32).unwrap();
        let x = Tensor::ones((2, 5, 3), DType::F32, &crate::nn::device()).unwrap();
        let v = m.velocity(&x, &[0.1, 0.7], &cond(2, 5, 3, 1)).unwrap();
        assert_eq!(v.dims(), &[2, 5, 3]);
        assert_eq!(crate::nn::scalar(&v.abs().unwrap().max_all().unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn classes_and_time_change_the_output() {
        let cfg = DiTConfig {
            width: 16,
            depth: 1,
            heads: 2,
            target_dim: 3,
            n_classes: 4,
            zero_init: false,
            ..Default::default()
        };
        let m = DiT::new(cfg, 0, DType::F32).unwrap();
        let x = Tensor::ones((1, 5, 3), DType::F32, &crate::nn::device()).unwrap();
        let a = m.velocity(&x, &[0.3], &cond(1, 5, 3, 0)).unwrap();
        let b = m.velocity(&x, &[0.3], &cond(1, 5, 3, 4)).unwrap();
        let c = m.velocity(&x, &[0.6], &cond(1, 5, 3, 0)).unwrap();
        let diff = |p: &Tensor, q: &Tensor| crate::nn::scalar(&(p - q).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff(&a, &b) > 0.0);
        assert!(diff(&a, &c) > 0.0);
    }

    #[test]
    fn paper_scale_depth() {
        assert_eq!(DiTConfig::paper_scale(128, 8).depth, 22);
        assert_eq!(DiTConfig::paper_scale(128, 8).width, 1024);
    }
}
