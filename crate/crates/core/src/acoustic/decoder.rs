use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::{StftConfig, Waveform, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::Latent;
use crate::nn::dsp::TensorStft;
use crate::nn::{Conv1d, Init, LayerNorm, Linear, ParamStore, TransformerConfig, TransformerStack};

/// Largest log-magnitude the head may emit (magnitude 100).
const MAX_LOG_MAG: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub n_dec: usize,
    pub voc_hidden: usize,
    pub n_voc: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pos_kernel: usize,
    /// Latent frame rate, 50 or 25.
    pub frame_rate: u32,
    pub stft: StftConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            hidden: 256,
            n_dec: 4,
            voc_hidden: 256,
            n_voc: 3,
            heads: 4,
            ffn_mult: 2,
            pos_kernel: 5,
            frame_rate: 50,
            stft: StftConfig::default(),
        }
    }
}

impl DecoderConfig {
    /// The full-size configuration: 1024 wide, 24 decoder and 16 vocoder layers.
    pub fn paper_scale(d_z: usize) -> Self {
        Self {
            d_z,
            hidden: 1024,
            n_dec: 24,
            voc_hidden: 1024,
            n_voc: 16,
            heads: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_rate != 50 && self.frame_rate != 25 {
            return Err(Error::config(format!("decoder frame rate {} not in {{50, 25}}", self.frame_rate)));
        }
        if self.stft.hop * 2 != SAMPLES_PER_FRAME || self.stft.win != self.stft.nfft {
            return Err(Error::config("decoder head needs hop 160 and win == nfft"));
        }
        if self.d_z == 0 || self.hidden == 0 || self.voc_hidden == 0 {
            return Err(Error::config("decoder widths must be positive"));
        }
        Ok(())
    }

    fn block(&self, dim: usize) -> TransformerConfig {
        TransformerConfig {
            dim,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pos_kernel: self.pos_kernel,
            causal: true,
        }
    }
}

/// Causal transformer decoder, vocoder stack and ISTFT head.
pub struct DecoderWeights {
    pub config: DecoderConfig,
    pub store: ParamStore,
    input: Conv1d,
    dec: TransformerStack,
    to_voc: Linear,
    voc: TransformerStack,
    ln_out: LayerNorm,
    log_mag: Linear,
    phase: Linear,
    /// `(-1)^k` per bin: moves zero phase from the frame start to the window centre.
    centre_sign: Tensor,
    istft: TensorStft,
}

impl std::fmt::Debug for DecoderWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DecoderWeights").field("config", &self.config).finish()
    }
}

/// Nearest-neighbour 2x upsampling over time of `[B, T, C]`.
fn upsample2(h: &Tensor) -> Result<Tensor> {
    let (b, t, c) = h.dims3()?;
    Ok(h.unsqueeze(2)?.broadcast_as((b, t, 2, c))?.reshape((b, 2 * t, c))?)
}

impl DecoderWeights {
    pub fn new(config: DecoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_store(config, ParamStore::new(seed, dtype))
    }

    pub fn from_store(config: DecoderConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let s = store.root();
        let bins = config.stft.bins();
        let input = Conv1d::causal(&s.pp("input"), config.d_z, config.hidden, 3)?;
        let dec = TransformerStack::new(&s.pp("dec"), &config.block(config.hidden), config.n_dec)?;
        let to_voc = Linear::new(&s.pp("to_voc"), config.hidden, config.voc_hidden)?;
        let voc = TransformerStack::new(&s.pp("voc"), &config.block(config.voc_hidden), config.n_voc)?;
        let ln_out = LayerNorm::new(&s.pp("ln_out"), config.voc_hidden)?;
        let log_mag = Linear::new(&s.pp("log_mag"), config.voc_hidden, bins)?;
        // Starts at zero phase about the window centre in every bin, so a fresh
        // head emits a coherent signal whose envelope the magnitudes control.
        let phase = Linear::with_init(&s.pp("phase"), config.voc_hidden, 2 * bins, Init::Zeros, Init::Zeros)?;
        let sign: Vec<f64> = (0..bins).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let centre_sign = Tensor::from_vec(sign, bins, &crate::nn::device())?.to_dtype(store.dtype())?;
        let istft = TensorStft::new(config.stft, store.dtype())?;
        Ok(Self {
            config,
            store,
            input,
            dec,
            to_voc,
            voc,
            ln_out,
            log_mag,
            phase,
            centre_sign,
            istft,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    /// Number of 50 Hz frames a latent of `t` frames decodes to.
    pub fn frames_for(&self, t: usize) -> usize {
        if self.config.frame_rate == 25 {
            2 * t
        } else {
            t
        }
    }

    /// `[B, T', d_z] -> [B, frames * 320]`; `frames` trims the 25 Hz doubling.
    pub fn forward(&self, z: &Tensor, frames: usize) -> Result<Tensor> {
        let (_, t, d) = z.dims3()?;
        if d != self.config.d_z {
            return Err(Error::config(format!("decoder expects {}-dim latents, got {d}", self.config.d_z)));
        }
        let full = self.frames_for(t);
        if frames > full || frames + 1 < full || frames == 0 {
            return Err(Error::config(format!("{t} latent frames cannot decode to {frames} frames")));
        }
        let mut h = self.input.forward(&z.transpose(1, 2)?.contiguous()?)?.transpose(1, 2)?;
        if self.config.frame_rate == 25 {
            h = upsample2(&h)?.narrow(1, 0, frames)?;
        }
        let h = self.dec.forward(&h.contiguous()?)?;
        let h = self.to_voc.forward(&upsample2(&h)?)?;
        let h = self.ln_out.forward(&self.voc.forward(&h)?)?;
        let bins = self.config.stft.bins();
        let mag = self.log_mag.forward(&h)?.minimum(MAX_LOG_MAG)?.exp()?;
        let mag = mag.broadcast_mul(&self.centre_sign)?;
        let p = self.phase.forward(&h)?;
        let p_re = (p.narrow(2, 0, bins)? + 1.0)?;
        let p_im = p.narrow(2, bins, bins)?;
        // Unit phasor of (p_re, p_im), i.e. (cos, sin) of its angle.
        let norm = ((p_re.sqr()? + p_im.sqr()?)? + 1e-8)?.sqrt()?;
        let re = (&mag * p_re.div(&norm)?)?;
        let im = (&mag * p_im.div(&norm)?)?;
        self.istft.inverse(&re, &im)
    }

    /// Decodes one latent; `frames` defaults to the full length.
    pub fn decode(&self, z: &Latent, frames: Option<usize>) -> Result<Waveform> {
        if z.frame_rate() != self.config.frame_rate {
            return Err(Error::config(format!(
                "latent at {} Hz, decoder trained at {} Hz",
                z.frame_rate(),
                self.config.frame_rate
            )));
        }
        let frames = frames.unwrap_or_else(|| self.frames_for(z.frames()));
        let y = self.forward(&z.to_tensor(self.dtype())?, frames)?;
        let y = y.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("decoder produced non-finite samples"));
        }
        Waveform::new(y, SAMPLE_RATE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(rate: u32) -> DecoderConfig {
        DecoderConfig {
            d_z: 4,
            hidden: 16,
            n_dec: 1,
            voc_hidden: 16,
            n_voc: 1,
            heads: 2,
            pos_kernel: 3,
            frame_rate: rate,
            ..Default::default()
        }
    }

    fn latent(t: usize, rate: u32, seed: u64) -> Latent {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        Latent::new((0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), t, 4, rate).unwrap()
    }

    #[test]
    fn one_second_of_latents_is_one_second_of_audio() {
        let dec = DecoderWeights::new(tiny(50), 1, DType::F32).unwrap();
        assert_eq!(dec.decode(&latent(50, 50, 0), None).unwrap().len(), 16_000);
        let dec = DecoderWeights::new(tiny(25), 1, DType::F32).unwrap();
        assert_eq!(dec.decode(&latent(25, 25, 0), None).unwrap().len(), 16_000);
        assert_eq!(dec.decode(&latent(26, 25, 0), Some(51)).unwrap().len(), 51 * 320);
    }

    #[test]
    fn zero_latent_is_finite_and_deterministic() {
        let dec = DecoderWeights::new(tiny(50), 1, DType::F32).unwrap();
        let z = Latent::new(vec![0.0; 40], 10, 4, 50).unwrap();
        let a = dec.decode(&z, None).unwrap();
        let b = dec.decode(&z, None).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert!(a.samples().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rate_mismatch_is_config_error() {
        let dec = DecoderWeights::new(tiny(50), 1, DType::F32).unwrap();
        assert!(matches!(dec.decode(&latent(10, 25, 0), None), Err(Error::Config(_))));
    }

    #[test]
    fn perturbing_a_frame_leaves_earlier_samples_untouched() {
        for rate in [50, 25] {
            let dec = DecoderWeights::new(tiny(rate), 2, DType::F64).unwrap();
            let base = latent(12, rate, 3);
            let y0 = dec.decode(&base, None).unwrap();
            for t in [1usize, 5, 11] {
                let mut data = base.data().to_vec();
                data[t * 4] += 1.0;
                data[t * 4 + 2] -= 0.5;
                let z = Latent::new(data, 12, 4, rate).unwrap();
                let y1 = dec.decode(&z, None).unwrap();
                // First 50 Hz frame fed by latent frame t.
                let first = if rate == 25 { 2 * t } else { t };
                let boundary = (first - 1) * 320;
                let diff: Vec<usize> = (0..y0.len())
                    .filter(|&i| y0.samples()[i] != y1.samples()[i])
                    .collect();
                assert!(!diff.is_empty(), "perturbation had no effect");
                assert!(diff[0] >= boundary, "rate {rate} frame {t}: change at {} < {boundary}", diff[0]);
            }
        }
    }

    #[test]
    fn paper_scale_shape() {
        let c = DecoderConfig::paper_scale(128);
        assert_eq!((c.hidden, c.n_dec, c.n_voc, c.stft.hop, c.stft.nfft), (1024, 24, 16, 160, 640));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn length_law(t in 5usize..=500) {
            let dec = DecoderWeights::new(tiny(50), 1, DType::F32).unwrap();
            prop_assert_eq!(dec.decode(&latent(t, 50, t as u64), None).unwrap().len(), t * 320);
        }
    }
}
