use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::params::{Init, Scope};
use crate::error::{Error, Result};

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable softmax over the last dimension, built from primitive
/// ops so it differentiates through candle's autograd.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", (d_out, d_in), Init::Uniform(bound))?,
            bias: Some(s.get("bias", d_out, Init::Uniform(bound))?),
        })
    }

    pub fn with_init(s: &Scope, d_in: usize, d_out: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", (d_out, d_in), w)?,
            bias: Some(s.get("bias", d_out, b)?),
        })
    }

    pub fn no_bias(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", (d_out, d_in), Init::Uniform(bound))?,
            bias: None,
        })
    }

    /// `x[..., d_in] -> [..., d_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", dim, Init::Ones)?,
            beta: s.get("beta", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xc = normalize_last(x, self.eps)?;
        Ok(xc.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Zero-mean, unit-variance over the last dimension, no affine part.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Time padding convention for convolutions over `[B, T, C]` / `[B, C, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// All padding on the left: output `t` sees inputs `<= t` only.
    Causal,
    /// Symmetric padding (odd kernels).
    Same,
}

/// Per-channel temporal filter over `[B, T, C]`, implemented as a sum of
/// shifted copies so every op has a backward pass.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    padding: Padding,
}

impl DepthwiseConv {
    pub fn new(s: &Scope, channels: usize, kernel: usize, padding: Padding) -> Result<Self> {
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", (kernel, channels), Init::Uniform(bound))?,
            bias: s.get("bias", channels, Init::Zeros)?,
            kernel,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let (left, right) = match self.padding {
            Padding::Causal => (self.kernel - 1, 0),
            Padding::Same => ((self.kernel - 1) / 2, self.kernel / 2),
        };
        let xp = x.pad_with_zeros(1, left, right)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let w = self.weight.get(j)?;
            let term = xp.narrow(1, j, t)?.broadcast_mul(&w)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let acc = acc.ok_or_else(|| Error::internal("zero-size kernel"))?;
        Ok(acc.broadcast_add(&self.bias)?)
    }
}

/// Dense 1-D convolution over `[B, C, T]` with explicit left/right padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    pad_right: usize,
}

impl Conv1d {
    pub fn new(
        s: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Ok(Self {
            weight: s.get("weight", (c_out, c_in, kernel), Init::Uniform(bound))?,
            bias: s.get("bias", c_out, Init::Uniform(bound))?,
            kernel,
            stride,
            pad_left,
            pad_right,
        })
    }

    /// Causal convolution: output `t` depends on inputs `<= t`.
    pub fn causal(s: &Scope, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(s, c_in, c_out, kernel, 1, kernel - 1, 0)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xp = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(2, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let y = xp.conv1d(&self.weight, 0, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    causal: bool,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize, causal: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&s.pp("q"), dim, dim)?,
            k: Linear::new(&s.pp("k"), dim, dim)?,
            v: Linear::new(&s.pp("v"), dim, dim)?,
            o: Linear::new(&s.pp("o"), dim, dim)?,
            heads,
            causal,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let dh = c / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if self.causal {
            scores = scores.broadcast_add(&causal_mask(t, x.dtype())?)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        self.o.forward(&out)
    }
}

fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let m: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(m, (t, t), &super::device())?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&s.pp("up"), dim, hidden)?,
            down: Linear::new(&s.pp("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Kernel of the depthwise convolution that supplies relative position.
    pub pos_kernel: usize,
    pub causal: bool,
}

/// Pre-norm block: convolutional position mixing, self-attention, feed-forward,
/// each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln_pos: LayerNorm,
    pos: DepthwiseConv,
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(s: &Scope, cfg: &TransformerConfig) -> Result<Self> {
        let padding = if cfg.causal { Padding::Causal } else { Padding::Same };
        Ok(Self {
            ln_pos: LayerNorm::new(&s.pp("ln_pos"), cfg.dim)?,
            pos: DepthwiseConv::new(&s.pp("pos"), cfg.dim, cfg.pos_kernel, padding)?,
            ln_attn: LayerNorm::new(&s.pp("ln_attn"), cfg.dim)?,
            attn: MultiHeadAttention::new(&s.pp("attn"), cfg.dim, cfg.heads, cfg.causal)?,
            ln_ffn: LayerNorm::new(&s.pp("ln_ffn"), cfg.dim)?,
            ffn: FeedForward::new(&s.pp("ffn"), cfg.dim, cfg.dim * cfg.ffn_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.pos.forward(&self.ln_pos.forward(x)?)?)?;
        let x = (&x + self.attn.forward(&self.ln_attn.forward(&x)?)?)?;
        Ok((&x + self.ffn.forward(&self.ln_ffn.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    /// Blocks are named `{scope}.{i}`.
    pub fn new(s: &Scope, cfg: &TransformerConfig, layers: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(&s.pp(i), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    /// Output after each block, first to last.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}
