//! Masked-frame prediction pretraining for the toy encoder.
//!
//! Half of the 50 Hz frames of each crop are replaced by the mask embedding
//! in contiguous spans; a linear head on the last layer regresses the
//! standardized log-mel energy of each masked frame (mean of the two 100 Hz
//! mel frames it covers) under an L2 loss.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderWeights;
use crate::audio::{mel_spectrogram, Corpus, MelConfig, MelFilterbank, Split};
use crate::data::{crop_batch, CropBatch, CropSampler};
use crate::error::{Error, Result};
use crate::nn::{scalar, AdamW, AdamWConfig, Linear, ParamStore};
use crate::seed;
use crate::train::lr_schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub crop_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub mask_ratio: f64,
    pub mask_span: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            crop_frames: 50,
            peak_lr: 5e-4,
            warmup_steps: 500,
            mask_ratio: 0.5,
            mask_span: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// `(step, training loss)` every tenth of the run.
    pub train_curve: Vec<(u64, f64)>,
}

/// Span mask with at least `ratio * frames` masked frames.
pub fn span_mask(rng: &mut impl Rng, frames: usize, ratio: f64, span: usize) -> Vec<f32> {
    let target = ((frames as f64) * ratio).ceil() as usize;
    let mut m = vec![0.0f32; frames];
    let mut count = 0;
    let span = span.clamp(1, frames.max(1));
    while count < target {
        let start = rng.random_range(0..=frames - span);
        for v in &mut m[start..start + span] {
            if *v == 0.0 {
                *v = 1.0;
                count += 1;
            }
        }
    }
    m
}

/// Per-utterance 50 Hz log-mel targets, standardized with training-split statistics.
pub struct MelTargets {
    per_utt: Vec<Vec<Vec<f32>>>,
    n_mels: usize,
}

impl MelTargets {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let fb = MelFilterbank::new(MelConfig::default())?;
        let mut raw: Vec<Vec<Vec<f64>>> = Vec::with_capacity(corpus.len());
        for w in &corpus.waves {
            let m = mel_spectrogram(w, &fb)?;
            let t = w.len() / crate::audio::SAMPLES_PER_FRAME;
            raw.push(
                (0..t)
                    .map(|i| {
                        m.frames[2 * i]
                            .iter()
                            .zip(&m.frames[2 * i + 1])
                            .map(|(a, b)| 0.5 * (a + b))
                            .collect()
                    })
                    .collect(),
            );
        }
        let n_mels = fb.n_mels();
        let mut mean = vec![0.0; n_mels];
        let mut sq = vec![0.0; n_mels];
        let mut n = 0.0;
        for i in corpus.indices(Split::Train) {
            for row in &raw[i] {
                for (k, v) in row.iter().enumerate() {
                    mean[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        let stats: Vec<(f64, f64)> = mean
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                (m, (q / n - m * m).max(1e-8).sqrt())
            })
            .collect();
        let per_utt = raw
            .into_iter()
            .map(|u| {
                u.into_iter()
                    .map(|row| {
                        row.iter()
                            .zip(&stats)
                            .map(|(v, (m, s))| ((v - m) / s) as f32)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { per_utt, n_mels })
    }

    fn batch(&self, b: &CropBatch, dtype: DType) -> Result<Tensor> {
        let mut out = Vec::with_capacity(b.utterances.len() * b.crop_frames * self.n_mels);
        for (&u, &off) in b.utterances.iter().zip(&b.offsets) {
            let rows = &self.per_utt[u];
            for t in off..off + b.crop_frames {
                match rows.get(t) {
                    Some(r) => out.extend_from_slice(r),
                    None => out.extend(std::iter::repeat(0.0).take(self.n_mels)),
                }
            }
        }
        Ok(Tensor::from_vec(out, (b.utterances.len(), b.crop_frames, self.n_mels), &crate::nn::device())?
            .to_dtype(dtype)?)
    }
}

struct MaskedLoss<'a> {
    enc: &'a EncoderWeights,
    head: Linear,
}

impl MaskedLoss<'_> {
    fn loss(&self, batch: &CropBatch, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let layers = self.enc.forward_layers(&batch.audio, Some(mask))?;
        let last = layers.last().ok_or_else(|| Error::internal("encoder without layers"))?;
        let pred = self.head.forward(last)?;
        let m = mask.to_dtype(pred.dtype())?.unsqueeze(2)?;
        let err = (pred - targets)?.sqr()?.broadcast_mul(&m)?.sum_all()?;
        let denom = (m.sum_all()? * targets.dim(2)? as f64)?;
        Ok(err.div(&denom)?)
    }
}

fn mask_tensor(rng: &mut impl Rng, b: usize, t: usize, cfg: &PretrainConfig) -> Result<Tensor> {
    let v: Vec<f32> = (0..b)
        .flat_map(|_| span_mask(rng, t, cfg.mask_ratio, cfg.mask_span))
        .collect();
    Ok(Tensor::from_vec(v, (b, t), &crate::nn::device())?)
}

/// Pretrains `enc` in place on the corpus training split. `steps == 0`
/// leaves the weights untouched.
pub fn pretrain_toy_encoder(enc: &EncoderWeights, corpus: &Corpus, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let dtype = enc.dtype();
    let targets = MelTargets::new(corpus)?;
    let head_store = ParamStore::new(seed::derive(cfg.seed, "pretrain.head"), dtype);
    let head = Linear::new(&head_store.scope("head"), enc.config.d_s, targets.n_mels)?;
    let model = MaskedLoss { enc, head };

    // Fixed validation set: the first crop of every held-out utterance, fixed masks.
    let val_picks: Vec<(usize, usize)> = corpus.indices(Split::Test).into_iter().map(|u| (u, 0)).collect();
    if val_picks.is_empty() {
        return Err(Error::data("no held-out utterances for validation"));
    }
    let val_batch = crop_batch(corpus, &val_picks, cfg.crop_frames, dtype)?;
    let val_targets = targets.batch(&val_batch, dtype)?;
    let mut vrng = seed::rng(seed::derive(cfg.seed, "pretrain.valmask"));
    let val_mask = mask_tensor(&mut vrng, val_picks.len(), cfg.crop_frames, cfg)?;
    let val_loss = |m: &MaskedLoss| -> Result<f64> { scalar(&m.loss(&val_batch, &val_targets, &val_mask)?) };

    let initial_val_loss = val_loss(&model)?;
    let sampler = CropSampler::new(corpus, Split::Train, cfg.batch, cfg.crop_frames, seed::derive(cfg.seed, "pretrain.batches"))?;
    let mut params = enc.trainable_vars();
    params.extend(head_store.vars().into_iter().map(|(n, v)| (format!("head.{n}"), v)));
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut curve = Vec::new();
    let log_every = (cfg.steps / 10).max(1);
    for step in 0..cfg.steps {
        let batch = sampler.batch_at(corpus, step, dtype)?;
        let tgt = targets.batch(&batch, dtype)?;
        let mut rng = seed::rng(seed::derive_step(seed::derive(cfg.seed, "pretrain.mask"), step));
        let mask = mask_tensor(&mut rng, cfg.batch, cfg.crop_frames, cfg)?;
        let loss = model.loss(&batch, &tgt, &mask)?;
        let lv = scalar(&loss)?;
        if !lv.is_finite() {
            return Err(Error::numeric(format!("masked-prediction loss diverged at step {step}")));
        }
        let mut grads = loss.backward()?;
        let lr = lr_schedule(step, cfg.steps, cfg.warmup_steps.min(cfg.steps.saturating_sub(1)), cfg.peak_lr)?;
        opt.step(&params, &mut grads, lr)?;
        if step % log_every == 0 || step + 1 == cfg.steps {
            log::debug!("pretrain step {step} loss {lv:.4}");
            curve.push((step, lv));
        }
    }
    Ok(PretrainReport {
        initial_val_loss,
        final_val_loss: val_loss(&model)?,
        train_curve: curve,
    })
}
