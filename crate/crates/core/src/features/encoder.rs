//! Toy masked-prediction speech encoder standing in for a frozen SSL model.
//!
//! A strided convolution stack (total stride 320) turns 16 kHz audio into
//! 50 Hz frames, which a stack of non-causal transformer blocks refines. The
//! output of a configurable tap layer is the source feature sequence.
//!
//! The first convolution is a learnable filterbank: its channels come in
//! (cosine, sine) pairs, initialized as Hann-windowed tones at mel-spaced
//! centre frequencies, and each pair is reduced to a log band energy. Later
//! convolutions are ordinary strided layers with GELU.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::container::FeatureSequence;
use crate::audio::{hann_window, hz_to_mel, mel_to_hz, Waveform, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::{gelu, Conv1d, Init, LayerNorm, Linear, ParamStore, TransformerConfig, TransformerStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_s: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pos_kernel: usize,
    pub conv_channels: usize,
    pub strides: Vec<usize>,
    /// 1-based transformer layer whose output is the feature; 0 means last.
    pub tap_layer: usize,
    /// Keep the convolutional front end fixed when the encoder is fine-tuned.
    pub freeze_frontend: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_s: 256,
            n_layers: 6,
            heads: 4,
            ffn_mult: 2,
            pos_kernel: 5,
            conv_channels: 64,
            strides: vec![160, 2],
            tap_layer: 0,
            freeze_frontend: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.strides.iter().product();
        if total != SAMPLES_PER_FRAME {
            return Err(Error::config(format!(
                "conv strides {:?} multiply to {total}, need {SAMPLES_PER_FRAME}",
                self.strides
            )));
        }
        if self.strides.len() < 2 {
            return Err(Error::config("the conv front end needs at least two strided layers"));
        }
        if self.strides[0] < 40 {
            return Err(Error::config(format!(
                "first stride {} too short for the filterbank layer (need >= 40 samples)",
                self.strides[0]
            )));
        }
        if self.conv_channels < 4 || self.conv_channels % 2 != 0 {
            return Err(Error::config("conv_channels must be even and at least 4"));
        }
        if self.d_s < 8 {
            return Err(Error::config("d_s must be at least 8"));
        }
        if self.n_layers < 4 {
            return Err(Error::config("the encoder needs at least 4 transformer layers"));
        }
        if self.tap_layer > self.n_layers {
            return Err(Error::config(format!(
                "tap layer {} beyond {} layers",
                self.tap_layer, self.n_layers
            )));
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.d_s,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pos_kernel: self.pos_kernel,
            causal: false,
        }
    }

    fn tap_index(&self) -> usize {
        if self.tap_layer == 0 {
            self.n_layers - 1
        } else {
            self.tap_layer - 1
        }
    }
}

/// Power floor before the log in the filterbank layer.
const FILTERBANK_FLOOR: f64 = 1e-6;

/// Input gain of the filterbank layer. The filters are stored at unit scale
/// so optimizer steps stay small relative to them; with this gain a unit tone
/// at a centre frequency has unit band power.
fn filterbank_gain(kernel: usize) -> f64 {
    2.0 / hann_window(kernel).iter().sum::<f64>()
}

/// `[2 * bands, 1, kernel]` flattened: Hann-windowed cosines then sines at
/// mel-spaced centres from 50 Hz to 7.6 kHz.
fn filterbank_init(bands: usize, kernel: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let window = hann_window(kernel);
    let (lo, hi) = (hz_to_mel(50.0), hz_to_mel(7600.0));
    let centres: Vec<f64> = (0..bands)
        .map(|b| mel_to_hz(lo + (hi - lo) * b as f64 / (bands - 1).max(1) as f64))
        .collect();
    let tone = |hz: f64, phase: f64| -> Vec<f64> {
        (0..kernel)
            .map(|n| window[n] * (2.0 * PI * hz * n as f64 / f64::from(SAMPLE_RATE) + phase).cos())
            .collect()
    };
    let cos = centres.iter().flat_map(|&f| tone(f, 0.0));
    let sin = centres.iter().flat_map(|&f| tone(f, -PI / 2.0));
    cos.chain(sin).collect()
}

/// Encoder weights and the model built over them.
///
/// The model's tensors share storage with the store's variables, so
/// optimizer updates to the store are visible to the next forward pass.
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub store: ParamStore,
    frontend: Vec<Conv1d>,
    ln_in: LayerNorm,
    proj: Linear,
    mask_emb: Tensor,
    pub layers: TransformerStack,
}

impl std::fmt::Debug for EncoderWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderWeights")
            .field("config", &self.config)
            .field("params", &self.store.num_elements())
            .finish()
    }
}

/// Deterministic initialization from `seed`.
pub fn build_toy_encoder(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<EncoderWeights> {
    EncoderWeights::from_store(config.clone(), ParamStore::new(seed, dtype))
}

impl EncoderWeights {
    /// Builds the model over `store`, creating any parameters it lacks.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let mut frontend = Vec::with_capacity(config.strides.len());
        let bands = config.conv_channels / 2;
        let mut c_in = 1;
        for (i, &s) in config.strides.iter().enumerate() {
            let scope = root.pp("frontend").pp(i);
            if i == 0 {
                scope.get_values("weight", (config.conv_channels, 1, 2 * s), filterbank_init(bands, 2 * s))?;
                scope.get("bias", config.conv_channels, Init::Zeros)?;
            }
            // Kernel 2s with s samples of padding split left/right: floor(L / s) outputs.
            let out = config.conv_channels;
            frontend.push(Conv1d::new(&scope, c_in, out, 2 * s, s, s / 2, s - s / 2)?);
            c_in = if i == 0 { bands } else { out };
        }
        let ln_in = LayerNorm::new(&root.pp("ln_in"), config.conv_channels)?;
        let proj = Linear::new(&root.pp("proj"), config.conv_channels, config.d_s)?;
        let mask_emb = root.get("mask_emb", config.d_s, Init::Normal(0.5))?;
        let layers = TransformerStack::new(&root.pp("layers"), &config.transformer(), config.n_layers)?;
        let w = Self {
            config,
            frontend,
            ln_in,
            proj,
            mask_emb,
            layers,
            store,
        };
        Ok(w)
    }

    /// Value-independent deep copy, used as the frozen reference.
    pub fn clone_frozen(&self) -> Result<Self> {
        Self::from_store(self.config.clone(), self.store.deep_clone(0)?)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        self.store.digest()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Trainable parameter names: everything, minus the front end when frozen.
    pub fn trainable_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .vars()
            .into_iter()
            .filter(|(n, _)| !(self.config.freeze_frontend && n.starts_with("frontend.")))
            .collect()
    }

    /// Frames produced for `samples` input samples.
    pub fn frames_for(samples: usize) -> usize {
        samples / SAMPLES_PER_FRAME
    }

    /// Filterbank layer: `[B, L] -> [B, bands, L / strides[0]]` log band powers.
    fn log_bands(&self, audio: &Tensor) -> Result<Tensor> {
        let x = (audio.unsqueeze(1)? * filterbank_gain(2 * self.config.strides[0]))?;
        let h = self.frontend[0].forward(&x)?;
        let bands = self.config.conv_channels / 2;
        let power = (h.narrow(1, 0, bands)?.sqr()? + h.narrow(1, bands, bands)?.sqr()?)?;
        Ok((power + FILTERBANK_FLOOR)?.log()?)
    }

    /// Convolutional front end: `[B, L] -> [B, T, d_s]`, before any masking.
    pub fn frontend(&self, audio: &Tensor) -> Result<Tensor> {
        let (_, len) = audio.dims2()?;
        if len < SAMPLES_PER_FRAME {
            return Err(Error::data(format!(
                "waveform of {len} samples shorter than one {SAMPLES_PER_FRAME}-sample frame"
            )));
        }
        let mut h = self.log_bands(audio)?;
        for conv in &self.frontend[1..] {
            h = gelu(&conv.forward(&h)?)?;
        }
        let h = h.transpose(1, 2)?.contiguous()?;
        self.proj.forward(&self.ln_in.forward(&h)?)
    }

    /// Every transformer layer's output; `mask` (`[B, T]`, 1 = masked) swaps
    /// masked frames for the learned mask embedding.
    pub fn forward_layers(&self, audio: &Tensor, mask: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut h = self.frontend(audio)?;
        if let Some(m) = mask {
            let m = m.to_dtype(h.dtype())?.unsqueeze(2)?;
            let keep = (m.ones_like()? - &m)?;
            h = (h.broadcast_mul(&keep)? + m.broadcast_mul(&self.mask_emb.reshape((1, 1, ()))?)?)?;
        }
        self.layers.forward_all(&h)
    }

    /// Source features at the configured tap layer, `[B, T, d_s]`.
    pub fn forward(&self, audio: &Tensor) -> Result<Tensor> {
        let mut all = self.forward_layers(audio, None)?;
        Ok(all.swap_remove(self.config.tap_index()))
    }

    pub fn encode(&self, wave: &Waveform) -> Result<FeatureSequence> {
        let audio = Tensor::from_vec(wave.samples().to_vec(), (1, wave.len()), &crate::nn::device())?
            .to_dtype(self.dtype())?;
        FeatureSequence::from_tensor(&self.forward(&audio)?.detach(), 50)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_s: 16,
            n_layers: 4,
            heads: 2,
            ffn_mult: 2,
            pos_kernel: 3,
            conv_channels: 8,
            ..Default::default()
        }
    }

    fn wave(len: usize) -> Waveform {
        let s = (0..len).map(|i| ((i as f32) * 0.01).sin() * 0.3).collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn frame_rate_law() {
        let enc = build_toy_encoder(&tiny(), 0, DType::F32).unwrap();
        assert_eq!(enc.encode(&wave(16_000)).unwrap().frames(), 50);
        assert_eq!(enc.encode(&wave(24_000)).unwrap().frames(), 75);
        assert_eq!(enc.encode(&wave(16_000 + 319)).unwrap().frames(), 50);
        assert_eq!(enc.encode(&wave(32_000)).unwrap().frames(), 100);
        assert!(matches!(enc.encode(&wave(319)), Err(Error::Data(_))));
    }

    #[test]
    fn deterministic_and_clone_faithful() {
        let a = build_toy_encoder(&tiny(), 0, DType::F32).unwrap();
        let b = build_toy_encoder(&tiny(), 0, DType::F32).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let frozen = a.clone_frozen().unwrap();
        let w = wave(8000);
        assert_eq!(a.encode(&w).unwrap(), frozen.encode(&w).unwrap());
        let zero = Waveform::new(vec![0.0; 3200], 16_000).unwrap();
        let z1 = a.encode(&zero).unwrap();
        assert!(z1.data().iter().all(|v| v.is_finite()));
        assert_eq!(z1, a.encode(&zero).unwrap());
    }

    #[test]
    fn filterbank_starts_tuned_to_mel_centres() {
        let c = EncoderConfig { conv_channels: 32, ..tiny() };
        let enc = build_toy_encoder(&c, 0, DType::F64).unwrap();
        let bands = 16;
        let (lo, hi) = (hz_to_mel(50.0), hz_to_mel(7600.0));
        for b in [2usize, 7, 12] {
            let hz = mel_to_hz(lo + (hi - lo) * b as f64 / (bands - 1) as f64);
            let x: Vec<f64> = (0..3200).map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / 16_000.0).sin()).collect();
            let x = Tensor::from_vec(x, (1, 3200), &crate::nn::device()).unwrap();
            let e = enc.log_bands(&x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let mid: Vec<f64> = e.iter().map(|row| row[row.len() / 2]).collect();
            let peak = mid.iter().enumerate().max_by(|p, q| p.1.total_cmp(q.1)).unwrap().0;
            assert_eq!(peak, b, "{hz:.0} Hz tone");
            // Unit tone, unit band power.
            assert!(mid[b].abs() < 0.1, "band power {}", mid[b].exp());
        }
    }

    #[test]
    fn bad_stride_stack_rejected() {
        let mut c = tiny();
        c.strides = vec![5, 4, 4, 2];
        assert!(matches!(build_toy_encoder(&c, 0, DType::F32), Err(Error::Config(_))));
        let mut c = tiny();
        c.n_layers = 3;
        assert!(matches!(build_toy_encoder(&c, 0, DType::F32), Err(Error::Config(_))));
    }

    #[test]
    fn clone_survives_updates_to_original() {
        let a = build_toy_encoder(&tiny(), 1, DType::F32).unwrap();
        let frozen = a.clone_frozen().unwrap();
        let before = frozen.digest().unwrap();
        for (_, v) in a.store.vars() {
            v.set(&(v.as_tensor() + 1.0).unwrap()).unwrap();
        }
        assert_eq!(frozen.digest().unwrap(), before);
        assert_ne!(a.digest().unwrap(), before);
    }
}
