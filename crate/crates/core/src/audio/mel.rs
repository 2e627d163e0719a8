use super::stft::{stft, StftConfig};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Magnitudes are clamped to this value before the log.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub stft: StftConfig,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 100,
            fmin: 0.0,
            fmax: 8000.0,
            stft: StftConfig::default(),
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 1 {
            return Err(Error::config("n_mels must be at least 1"));
        }
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        if self.fmax > nyquist || self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(Error::config(format!(
                "mel range [{}, {}] Hz outside [0, {nyquist}]",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Triangular filters over the rFFT bins, peak value 1 at each band center.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels` rows of `nfft/2 + 1` weights.
    pub weights: Vec<Vec<f64>>,
    /// Band center frequencies in Hz, strictly increasing.
    pub centers: Vec<f64>,
    pub config: MelConfig,
}

impl MelFilterbank {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let bins = config.stft.bins();
        let sr = f64::from(SAMPLE_RATE);
        let lo = hz_to_mel(config.fmin);
        let hi = hz_to_mel(config.fmax);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let freqs: Vec<f64> = (0..bins)
            .map(|k| k as f64 * sr / config.stft.nfft as f64)
            .collect();
        let weights = (0..config.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                freqs
                    .iter()
                    .map(|&f| {
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            weights,
            centers: edges[1..=config.n_mels].to_vec(),
            config,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// Applies the filterbank to per-frame magnitudes and takes the floored log.
    pub fn apply(&self, magnitudes: &[Vec<f64>]) -> MelSpectrogram {
        let frames = magnitudes
            .iter()
            .map(|mag| {
                self.weights
                    .iter()
                    .map(|row| {
                        let e: f64 = row.iter().zip(mag).map(|(w, m)| w * m).sum();
                        e.max(LOG_FLOOR).ln()
                    })
                    .collect()
            })
            .collect();
        MelSpectrogram {
            frames,
            n_mels: self.n_mels(),
            fmin: self.config.fmin,
            fmax: self.config.fmax,
        }
    }
}

/// Log-amplitude mel spectrogram, `frames[f][m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

pub fn mel_spectrogram(wave: &Waveform, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    let spec = stft(wave, fb.config.stft)?;
    Ok(fb.apply(&spec.magnitudes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64) -> Waveform {
        let s = (0..8000)
            .map(|n| (amp * (2.0 * PI * freq * n as f64 / 16_000.0).sin()) as f32)
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn scale_round_trip() {
        for hz in [0.0, 250.0, 999.0, 1000.0, 3000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn filterbank_shape_properties() {
        let fb = MelFilterbank::new(MelConfig::default()).unwrap();
        assert_eq!(fb.n_mels(), 100);
        for row in &fb.weights {
            assert_eq!(row.len(), 321);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        assert!(fb.centers.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = MelConfig::default();
        c.n_mels = 0;
        assert!(matches!(MelFilterbank::new(c), Err(Error::Config(_))));
        let mut c = MelConfig::default();
        c.fmax = 9000.0;
        assert!(matches!(MelFilterbank::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn zero_signal_hits_floor() {
        let fb = MelFilterbank::new(MelConfig::default()).unwrap();
        let m = mel_spectrogram(&Waveform::new(vec![0.0; 3200], 16_000).unwrap(), &fb).unwrap();
        assert_eq!(m.num_frames(), 21);
        assert!(m.frames.iter().flatten().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn sine_argmax_is_nearest_center() {
        let fb = MelFilterbank::new(MelConfig::default()).unwrap();
        let m = mel_spectrogram(&sine(1000.0, 0.5), &fb).unwrap();
        // Oracle: direct triangular weight evaluation at 1000 Hz, independent of the
        // filter matrix. The band with the largest weight is the nearest center.
        let lo = hz_to_mel(0.0);
        let hi = hz_to_mel(8000.0);
        let edge = |i: usize| mel_to_hz(lo + (hi - lo) * i as f64 / 101.0);
        let mut best = (0usize, f64::MIN);
        for b in 0..100 {
            let (l, c, r) = (edge(b), edge(b + 1), edge(b + 2));
            let f = 1000.0;
            let w = if f <= c { (f - l) / (c - l) } else { (r - f) / (r - c) };
            if w > best.1 {
                best = (b, w);
            }
        }
        let nearest = fb
            .centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        assert_eq!(best.0, nearest);
        for frame in m.frames.iter().skip(2).take(20) {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn doubling_amplitude_adds_ln2() {
        let fb = MelFilterbank::new(MelConfig::default()).unwrap();
        let a = mel_spectrogram(&sine(440.0, 0.2), &fb).unwrap();
        let b = mel_spectrogram(&sine(440.0, 0.4), &fb).unwrap();
        for (fa, fbv) in a.frames.iter().zip(&b.frames) {
            for (&x, &y) in fa.iter().zip(fbv) {
                if x > LOG_FLOOR.ln() + 1e-9 {
                    assert!((y - x - 2f64.ln()).abs() < 1e-6);
                }
            }
        }
    }
}
