use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other}", path.display())),
    }
}

/// Reads a mono 16 kHz WAV file (16-bit PCM or 32-bit float).
///
/// No resampling or downmixing happens here: any other rate or channel
/// count is rejected.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::data(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::data(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM, clipping to the representable range.
pub fn save_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in wave.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, rate: u32, channels: u16, samples: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_raw(&p, 16_000, 1, &vec![0; 16_000]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 16_000);
        assert!(w.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("square.wav");
        let raw: Vec<i16> = (0..64).map(|i| if i % 2 == 0 { 32767 } else { -32767 }).collect();
        write_raw(&p, 16_000, 1, &raw);
        let w = load_wav(&p).unwrap();
        for (i, &s) in w.samples().iter().enumerate() {
            let expected = if i % 2 == 0 { 32767.0 / 32768.0 } else { -32767.0 / 32768.0 };
            assert_eq!(s, expected);
        }
    }

    #[test]
    fn rejects_other_rates_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cd.wav");
        write_raw(&p, 44_100, 1, &[0; 441]);
        assert!(matches!(load_wav(&p), Err(Error::Data(_))));
        let p = dir.path().join("stereo.wav");
        write_raw(&p, 16_000, 2, &[0; 32]);
        assert!(matches!(load_wav(&p), Err(Error::Data(_))));
    }

    #[test]
    fn float_wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for s in [0.25f32, -0.5, 0.125] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.25, -0.5, 0.125]);
    }
}
