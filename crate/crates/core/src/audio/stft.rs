use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// STFT geometry. Defaults are the vocoder head's: 640-point Hann, hop 160.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub nfft: usize,
    pub hop: usize,
    pub win: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            nfft: 640,
            hop: 160,
            win: 640,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Frames produced for `len` samples under centered framing.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    fn validate(&self) -> Result<()> {
        if self.nfft < 2 || self.hop == 0 || self.win == 0 || self.win > self.nfft {
            return Err(Error::config(format!("invalid STFT geometry {self:?}")));
        }
        Ok(())
    }

    /// Analysis window of length `nfft`: periodic Hann of length `win`,
    /// centered and zero-padded.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.nfft];
        let offset = (self.nfft - self.win) / 2;
        for (i, v) in hann_window(self.win).into_iter().enumerate() {
            w[offset + i] = v;
        }
        w
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Complex short-time spectrum, `frames[f][b]` with `b < nfft/2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|c| c.norm()).collect())
            .collect()
    }
}

/// Reflection padding without repeating the edge sample.
pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(Error::data(format!(
            "signal of {} samples too short for reflection padding of {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    Ok(out)
}

/// Centered STFT with reflection padding: `1 + len / hop` frames.
pub fn stft(wave: &Waveform, config: StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if wave.len() < config.win {
        return Err(Error::data(format!(
            "signal of {} samples shorter than one window ({})",
            wave.len(),
            config.win
        )));
    }
    let x: Vec<f64> = wave.samples().iter().map(|&s| f64::from(s)).collect();
    let padded = reflect_pad(&x, config.nfft / 2)?;
    let window = config.window();
    let n_frames = config.frames_for(x.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.nfft);
    let bins = config.bins();
    let mut buf = vec![Complex64::new(0.0, 0.0); config.nfft];
    let frames = (0..n_frames)
        .map(|f| {
            let start = f * config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..bins].to_vec()
        })
        .collect();
    Ok(ComplexSpectrogram { frames, config })
}

/// Inverse of [`stft`]: windowed overlap-add normalized by the summed squared
/// window, center padding removed, `frames * hop` samples returned.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let config = spec.config;
    config.validate()?;
    let n_frames = spec.num_frames();
    if n_frames == 0 {
        return Err(Error::data("empty spectrogram"));
    }
    let bins = config.bins();
    let window = config.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(config.nfft);
    let total = (n_frames - 1) * config.hop + config.nfft;
    let mut acc = vec![0.0f64; total];
    let mut wsum = vec![0.0f64; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); config.nfft];
    let scale = 1.0 / config.nfft as f64;
    for (f, frame) in spec.frames.iter().enumerate() {
        if frame.len() != bins {
            return Err(Error::data(format!(
                "frame {f} has {} bins, expected {bins}",
                frame.len()
            )));
        }
        // Hermitian extension; the imaginary parts of DC and Nyquist are dropped.
        for k in 0..config.nfft {
            buf[k] = if k < bins {
                frame[k]
            } else {
                frame[config.nfft - k].conj()
            };
        }
        buf[0].im = 0.0;
        if config.nfft % 2 == 0 {
            buf[config.nfft / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = f * config.hop;
        for i in 0..config.nfft {
            acc[start + i] += buf[i].re * scale * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let offset = config.nfft / 2;
    let out_len = n_frames * config.hop;
    let mut out = Vec::with_capacity(out_len);
    for i in offset..offset + out_len {
        let w = wsum[i];
        if w < 1e-8 {
            return Err(Error::numeric(format!(
                "window envelope {w:e} at sample {} is degenerate",
                i - offset
            )));
        }
        out.push((acc[i] / w) as f32);
    }
    Waveform::new(out, super::SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| (0.5 * (2.0 * PI * freq * n as f64 / 16_000.0).sin()) as f32)
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn noise(seed: u64, len: usize) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn frame_count_and_bins() {
        let s = stft(&noise(0, 16_000), StftConfig::default()).unwrap();
        assert_eq!(s.num_frames(), 101);
        assert!(s.frames.iter().all(|f| f.len() == 321));
    }

    #[test]
    fn zero_signal_zero_spectrum() {
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let s = stft(&w, StftConfig::default()).unwrap();
        assert!(s.frames.iter().flatten().all(|c| c.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_bin_40() {
        let s = stft(&sine(1000.0, 16_000), StftConfig::default()).unwrap();
        for mags in s.magnitudes().iter().skip(3).take(90) {
            let argmax = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 40);
        }
    }

    #[test]
    fn round_trip_interior() {
        let x = noise(3, 12_000);
        let back = istft(&stft(&x, StftConfig::default()).unwrap()).unwrap();
        let err = x
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-4, "max error {err}");
    }

    #[test]
    fn too_short_is_data_error() {
        let w = Waveform::new(vec![0.1; 639], 16_000).unwrap();
        assert!(matches!(stft(&w, StftConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn single_bin_impulse_matches_overlap_add() {
        // One frame, one bin: the closed-form inverse is a windowed cosine divided
        // by the (single-frame) squared-window envelope, i.e. cos / w on its support.
        let cfg = StftConfig::default();
        let bins = cfg.bins();
        let n_frames = 9;
        let k = 12usize;
        let mut frames = vec![vec![Complex64::new(0.0, 0.0); bins]; n_frames];
        frames[4][k] = Complex64::new(320.0, 0.0);
        let out = istft(&ComplexSpectrogram { frames, config: cfg }).unwrap();
        let w = cfg.window();
        // Oracle: explicit overlap-add over all frames.
        let total = (n_frames - 1) * cfg.hop + cfg.nfft;
        let mut acc = vec![0.0; total];
        let mut env = vec![0.0; total];
        for f in 0..n_frames {
            for i in 0..cfg.nfft {
                let val = if f == 4 {
                    // x[n] = (1/N) * 2 * Re(A e^{j 2 pi k n / N}) with A = 320
                    2.0 * 320.0 / cfg.nfft as f64 * (2.0 * PI * (k * i) as f64 / cfg.nfft as f64).cos()
                } else {
                    0.0
                };
                acc[f * cfg.hop + i] += val * w[i];
                env[f * cfg.hop + i] += w[i] * w[i];
            }
        }
        for (j, &o) in out.samples().iter().enumerate() {
            let p = j + cfg.nfft / 2;
            let expected = acc[p] / env[p];
            assert!((f64::from(o) - expected).abs() < 1e-5, "sample {j}");
        }
    }
}
