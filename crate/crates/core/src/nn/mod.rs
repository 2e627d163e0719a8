//! Small neural-network toolkit on top of candle: a seeded parameter store,
//! the layers shared by every model in the crate, AdamW, and differentiable
//! STFT/ISTFT/mel transforms.

pub mod dsp;
mod fft;
mod layers;
mod optim;
mod params;

pub use layers::{
    gelu, leaky_relu, normalize_last, softmax_last, Conv1d, DepthwiseConv, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, Padding, TransformerBlock, TransformerConfig, TransformerStack,
};
pub use optim::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, AdamWState};
pub use params::{tensor_bytes, Init, ParamStore, Scope};

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

/// All computation runs on the CPU.
pub fn device() -> Device {
    Device::Cpu
}

/// Scalar value of a rank-0 (or single-element) tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    let v = t
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::internal(format!("expected a scalar, got {} elements", v.len()))),
    }
}

/// Fails with a numeric error when any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("{what}: non-finite value at flat index {i}")));
    }
    Ok(())
}
