//! Differentiable short-time transforms for the training path.
//!
//! Framing uses reflection padding and the hop-chunk trick (the FFT size must
//! be a multiple of the hop), the DFT is an FFT-backed op with an exact
//! transpose for the backward pass, and the inverse applies that transpose
//! followed by overlap-add and division by the squared-window envelope.
//! Shapes: signals `[B, L]`, spectra `[B, F, bins]`.

use candle_core::{DType, Tensor};

use super::fft::DftPlan;
use crate::audio::{hann_window, MelFilterbank, StftConfig, LOG_FLOOR};
use crate::error::{Error, Result};

/// FFT plan and window for one STFT geometry.
#[derive(Debug, Clone)]
pub struct TensorStft {
    pub config: StftConfig,
    plan: DftPlan,
    /// `[nfft]` analysis/synthesis window.
    window: Tensor,
    /// `[2 * bins]`: one-sided inverse weights (1 or 2) over N, for re then im.
    inv_scale: Tensor,
    window_sq: Vec<f64>,
}

impl TensorStft {
    pub fn new(config: StftConfig, dtype: DType) -> Result<Self> {
        if config.win != config.nfft || config.nfft % config.hop != 0 {
            return Err(Error::config(format!(
                "tensor STFT needs win == nfft and hop dividing nfft, got {config:?}"
            )));
        }
        let n = config.nfft;
        let bins = config.bins();
        let w = hann_window(n);
        let dev = super::device();
        let scale: Vec<f64> = (0..2 * bins)
            .map(|j| {
                let k = j % bins;
                let c = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                c / n as f64
            })
            .collect();
        Ok(Self {
            config,
            plan: DftPlan::new(n),
            window: Tensor::from_vec(w.clone(), n, &dev)?.to_dtype(dtype)?,
            inv_scale: Tensor::from_vec(scale, 2 * bins, &dev)?.to_dtype(dtype)?,
            window_sq: w.iter().map(|x| x * x).collect(),
        })
    }

    /// Centered, reflection-padded frames `[B, 1 + L/hop, nfft]`.
    pub fn frames(&self, x: &Tensor) -> Result<Tensor> {
        let (_, len) = x.dims2()?;
        let n = self.config.nfft;
        let hop = self.config.hop;
        let pad = n / 2;
        if len <= pad {
            return Err(Error::data(format!("signal of {len} samples too short to frame")));
        }
        let mut idx: Vec<u32> = Vec::with_capacity(len + 2 * pad);
        idx.extend((1..=pad).rev().map(|i| i as u32));
        idx.extend((0..len).map(|i| i as u32));
        idx.extend((0..pad).map(|i| (len - 2 - i) as u32));
        let frames = 1 + len / hop;
        let r = n / hop;
        let chunks = frames - 1 + r;
        idx.truncate(chunks * hop);
        let idx = Tensor::from_vec(idx, chunks * hop, x.device())?;
        let padded = x.contiguous()?.index_select(&idx, 1)?;
        let b = x.dim(0)?;
        let chunked = padded.reshape((b, chunks, hop))?;
        let parts = (0..r)
            .map(|j| chunked.narrow(1, j, frames))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 2)?)
    }

    /// Real and imaginary parts, each `[B, F, bins]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let fr = self.frames(x)?.broadcast_mul(&self.window)?;
        let (b, f, n) = fr.dims3()?;
        let bins = self.config.bins();
        let spec = self.plan.forward(&fr.reshape((b * f, n))?)?.reshape((b, f, 2 * bins))?;
        Ok((spec.narrow(2, 0, bins)?, spec.narrow(2, bins, bins)?))
    }

    /// `sqrt(re^2 + im^2 + eps)`.
    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.forward(x)?;
        Ok(((re.sqr()? + im.sqr()?)? + 1e-12)?.sqrt()?)
    }

    /// Inverse transform to `[B, F * hop]`.
    pub fn inverse(&self, re: &Tensor, im: &Tensor) -> Result<Tensor> {
        let (b, f, bins) = re.dims3()?;
        if bins != self.config.bins() {
            return Err(Error::config(format!(
                "spectrum has {bins} bins, expected {}",
                self.config.bins()
            )));
        }
        let n = self.config.nfft;
        let hop = self.config.hop;
        let r = n / hop;
        let spec = Tensor::cat(&[re, im], 2)?.broadcast_mul(&self.inv_scale)?;
        let frames = self.plan.transpose(&spec.reshape((b * f, 2 * bins))?)?;
        let frames = frames.reshape((b, f, n))?.broadcast_mul(&self.window)?;
        let frames = frames.reshape((b, f, r, hop))?;
        let chunks = f - 1 + r;
        let mut acc: Option<Tensor> = None;
        for j in 0..r {
            let piece = frames.narrow(2, j, 1)?.squeeze(2)?.pad_with_zeros(1, j, r - 1 - j)?;
            acc = Some(match acc {
                Some(a) => (a + piece)?,
                None => piece,
            });
        }
        let acc = acc.ok_or_else(|| Error::internal("empty overlap-add"))?;
        let acc = acc.reshape((b, chunks * hop))?;
        // Squared-window envelope for this frame count.
        let mut env = vec![0.0f64; chunks * hop];
        for fi in 0..f {
            for (i, w2) in self.window_sq.iter().enumerate() {
                env[fi * hop + i] += w2;
            }
        }
        let offset = n / 2;
        let out_len = f * hop;
        let env: Vec<f64> = env[offset..offset + out_len].to_vec();
        if let Some(w) = env.iter().find(|&&w| w < 1e-8) {
            return Err(Error::numeric(format!("degenerate window envelope {w:e}")));
        }
        let inv_env = Tensor::from_vec(
            env.iter().map(|w| 1.0 / w).collect::<Vec<_>>(),
            (1, out_len),
            &super::device(),
        )?
        .to_dtype(re.dtype())?;
        Ok(acc.narrow(1, offset, out_len)?.broadcast_mul(&inv_env)?)
    }
}

/// Log-mel front end on tensors, matching [`crate::audio::mel_spectrogram`].
#[derive(Debug, Clone)]
pub struct TensorMel {
    stft: TensorStft,
    /// `[bins, n_mels]`.
    fb_t: Tensor,
}

impl TensorMel {
    pub fn new(fb: &MelFilterbank, dtype: DType) -> Result<Self> {
        let stft = TensorStft::new(fb.config.stft, dtype)?;
        let bins = fb.config.stft.bins();
        let rows: Vec<f64> = fb.weights.iter().flatten().copied().collect();
        let fb_t = Tensor::from_vec(rows, (fb.n_mels(), bins), &super::device())?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(Self { stft, fb_t })
    }

    /// `[B, L] -> [B, F, n_mels]` log-mel.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mag = self.stft.magnitude(x)?;
        Ok(mag.broadcast_matmul(&self.fb_t)?.maximum(LOG_FLOOR)?.log()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, stft, MelConfig, Waveform};
    use rand::{Rng, SeedableRng};

    fn noise(seed: u64, len: usize) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect()
    }

    #[test]
    fn matches_fft_path() {
        let x = noise(1, 3200);
        let w = Waveform::new(x.clone(), 16_000).unwrap();
        let reference = stft(&w, StftConfig::default()).unwrap();
        let ts = TensorStft::new(StftConfig::default(), DType::F64).unwrap();
        let xt = Tensor::from_vec(x.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), (1, 3200), &crate::nn::device()).unwrap();
        let (re, im) = ts.forward(&xt).unwrap();
        let re = re.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let im = im.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(re.len(), reference.num_frames());
        for (f, frame) in reference.frames.iter().enumerate() {
            for (k, c) in frame.iter().enumerate() {
                assert!((re[f][k] - c.re).abs() < 1e-9 && (im[f][k] - c.im).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let x: Vec<f64> = noise(2, 6400).iter().map(|&v| f64::from(v)).collect();
        let ts = TensorStft::new(StftConfig::default(), DType::F64).unwrap();
        let xt = Tensor::from_vec(x.clone(), (1, 6400), &crate::nn::device()).unwrap();
        let (re, im) = ts.forward(&xt).unwrap();
        let y = ts.inverse(&re, &im).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y.len(), (1 + 6400 / 160) * 160);
        for i in 0..6400 {
            assert!((y[i] - x[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn tensor_mel_matches_host_mel() {
        let x = noise(3, 4800);
        let fb = MelFilterbank::new(MelConfig::default()).unwrap();
        let host = mel_spectrogram(&Waveform::new(x.clone(), 16_000).unwrap(), &fb).unwrap();
        let tm = TensorMel::new(&fb, DType::F64).unwrap();
        let xt = Tensor::from_vec(x.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), (1, 4800), &crate::nn::device()).unwrap();
        let m = tm.forward(&xt).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in host.frames.iter().zip(&m) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
