use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::dsp::TensorMel;
use crate::nn::ensure_finite;

/// Weights of the mel, adversarial and feature-matching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticWeights {
    pub mel: f64,
    pub adv: f64,
    pub fm: f64,
}

impl Default for AcousticWeights {
    fn default() -> Self {
        Self {
            mel: 4.5,
            adv: 0.1,
            fm: 0.1,
        }
    }
}

impl AcousticWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mel", self.mel), ("adv", self.adv), ("fm", self.fm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Mel-to-adversarial weighting ratio.
    pub fn mel_adv_ratio(&self) -> f64 {
        self.mel / self.adv
    }
}

/// Weighted sum `mel·l_mel + adv·l_adv + fm·l_fm` of scalar tensors.
pub fn acoustic_loss(l_mel: &Tensor, l_adv: &Tensor, l_fm: &Tensor, w: &AcousticWeights) -> Result<Tensor> {
    w.validate()?;
    Ok((((l_mel * w.mel)? + (l_adv * w.adv)?)? + (l_fm * w.fm)?)?)
}

/// L1 distance between log-mel spectrograms of `[B, L]` batches, cropped to
/// the shorter length.
pub fn mel_loss(front: &TensorMel, y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    let n = y.dim(1)?.min(y_hat.dim(1)?);
    let a = front.forward(&y.narrow(1, 0, n)?)?;
    let b = front.forward(&y_hat.narrow(1, 0, n)?)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

fn mean_over(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::internal("loss over zero branches"));
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
}

/// Hinge discriminator objective averaged over branches.
pub fn disc_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::internal(format!("{} real vs {} fake branches", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        ensure_finite(r, "discriminator logits (real)")?;
        ensure_finite(f, "discriminator logits (generated)")?;
        let lr = (1.0 - r)?.relu()?.mean_all()?;
        let lf = (f + 1.0)?.relu()?.mean_all()?;
        terms.push((lr + lf)?);
    }
    mean_over(terms)
}

/// Hinge generator objective averaged over branches.
pub fn gen_adv_loss(fake: &[Tensor]) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(fake.len());
    for f in fake {
        ensure_finite(f, "discriminator logits (generated)")?;
        terms.push(f.mean_all()?.neg()?);
    }
    mean_over(terms)
}

/// Mean L1 over every (branch, tap) pair.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::internal(format!("{} real vs {} fake branches", real.len(), fake.len())));
    }
    let mut terms = Vec::new();
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(Error::internal(format!("branch {i}: {} vs {} taps", r.len(), f.len())));
        }
        for (a, b) in r.iter().zip(f) {
            terms.push((a - b)?.abs()?.mean_all()?);
        }
    }
    mean_over(terms)
}
