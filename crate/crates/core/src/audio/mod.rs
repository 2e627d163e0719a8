//! Waveform ingestion, short-time Fourier analysis, log-mel features and the
//! synthetic multi-speaker corpus used for desk-scale training.

mod corpus;
mod mel;
mod stft;
mod wav;

pub use corpus::{synth_corpus, Corpus, CorpusManifest, CorpusSpec, ManifestEntry, Split};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram, LOG_FLOOR};
pub use stft::{hann_window, istft, stft, ComplexSpectrogram, StftConfig};
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};

/// The only sample rate the toolkit accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Samples per latent frame (16 kHz / 50 Hz).
pub const SAMPLES_PER_FRAME: usize = 320;

/// Mono PCM signal at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::data(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(Error::data("empty waveform"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Copy of `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            if let Some(&s) = self.samples.get(start + i) {
                *o = s;
            }
        }
        Self::new(out, self.sample_rate)
    }

    pub fn scaled(&self, gain: f32) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}
