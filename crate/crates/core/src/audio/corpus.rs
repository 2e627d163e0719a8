//! Synthetic multi-speaker corpus.
//!
//! Each utterance is a chain of content segments. A content class is a set
//! of formant resonances plus an aspiration level; a speaker contributes a
//! base f0 with vibrato, a vocal-tract scale applied to every formant, a
//! spectral tilt, and a fixed high-frequency resonance. Labels are stored per
//! 20 ms frame so they line up with 50 Hz latents.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wav::{load_wav, save_wav};
use super::{Waveform, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_speakers: usize,
    pub n_classes: usize,
    pub n_utts: usize,
    /// Utterance duration range in seconds, inclusive.
    pub dur_range: (f64, f64),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 4,
            n_classes: 8,
            n_utts: 200,
            dur_range: (1.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub speaker: usize,
    /// One content class per 20 ms frame.
    pub classes: Vec<usize>,
    pub dur: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Writes line-delimited JSON, one entry per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads and validates a manifest: ids unique and every file present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let manifest = Self {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::data(format!("duplicate utterance id {}", e.id)));
            }
            let p = self.resolve(e);
            if !p.exists() {
                return Err(Error::data(format!("missing audio file {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Deterministic train/held-out partition: every tenth utterance is held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn contains(self, index: usize) -> bool {
        match self {
            Split::Train => index % 10 != 0,
            Split::Test => index % 10 == 0,
            Split::All => true,
        }
    }
}

/// Manifest plus decoded audio, in manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub waves: Vec<Waveform>,
}

impl Corpus {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = CorpusManifest::load(manifest_path)?;
        let waves = manifest
            .entries
            .iter()
            .map(|e| load_wav(manifest.resolve(e)))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, waves })
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| split.contains(i)).collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.manifest.entries.iter().map(|e| e.speaker + 1).max().unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.manifest
            .entries
            .iter()
            .flat_map(|e| e.classes.iter().map(|c| c + 1))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct Speaker {
    f0: f64,
    tract_scale: f64,
    tilt_db_per_octave: f64,
    resonance_hz: f64,
    vibrato_hz: f64,
}

#[derive(Debug, Clone)]
struct ContentClass {
    formants: [f64; 3],
    bandwidths: [f64; 3],
    gains: [f64; 3],
    aspiration: f64,
}

fn draw_speakers(rng: &mut ChaCha8Rng, n: usize) -> Vec<Speaker> {
    (0..n)
        .map(|i| {
            // Spread base pitches over 90-260 Hz, jittered per seed.
            let frac = (i as f64 + rng.random_range(0.2..0.8)) / n as f64;
            Speaker {
                f0: 90.0 * (260.0f64 / 90.0).powf(frac),
                tract_scale: rng.random_range(0.85..1.15),
                tilt_db_per_octave: rng.random_range(-9.0..-3.0),
                resonance_hz: rng.random_range(3800.0..5600.0),
                vibrato_hz: rng.random_range(3.0..6.0),
            }
        })
        .collect()
}

fn draw_classes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ContentClass> {
    let mut classes: Vec<ContentClass> = Vec::with_capacity(n);
    while classes.len() < n {
        let c = ContentClass {
            formants: [
                rng.random_range(250.0..900.0),
                rng.random_range(900.0..2600.0),
                rng.random_range(2300.0..3600.0),
            ],
            bandwidths: [
                rng.random_range(60.0..120.0),
                rng.random_range(80.0..160.0),
                rng.random_range(120.0..220.0),
            ],
            gains: [1.0, rng.random_range(0.4..0.9), rng.random_range(0.2..0.5)],
            aspiration: rng.random_range(0.0..0.3),
        };
        // Keep classes apart in (log F1, log F2) so they stay separable.
        let far = classes.iter().all(|o| {
            let d1 = (c.formants[0] / o.formants[0]).ln();
            let d2 = (c.formants[1] / o.formants[1]).ln();
            (d1 * d1 + d2 * d2).sqrt() > 0.18
        });
        if far {
            classes.push(c);
        }
    }
    classes
}

/// Amplitude response of the class formants for one speaker at `hz`.
fn envelope(class: &ContentClass, spk: &Speaker, hz: f64) -> f64 {
    let mut a = 0.0;
    for k in 0..3 {
        let f = class.formants[k] * spk.tract_scale;
        let x = (hz - f) / class.bandwidths[k];
        a += class.gains[k] / (1.0 + x * x);
    }
    let x = (hz - spk.resonance_hz) / 400.0;
    a += 0.15 / (1.0 + x * x);
    let octaves = (hz / 100.0).max(1.0).log2();
    a * 10f64.powf(spk.tilt_db_per_octave * octaves / 20.0)
}

fn synth_utterance(
    rng: &mut ChaCha8Rng,
    spk: &Speaker,
    classes: &[ContentClass],
    n_frames: usize,
) -> (Vec<f32>, Vec<usize>) {
    // Segment labels at 50 Hz, 5-15 frames each, no immediate repeats.
    let mut labels = Vec::with_capacity(n_frames);
    let mut prev = usize::MAX;
    while labels.len() < n_frames {
        let mut c = rng.random_range(0..classes.len());
        if c == prev {
            c = (c + 1 + rng.random_range(0..classes.len() - 1)) % classes.len();
        }
        let len = rng.random_range(5..=15).min(n_frames - labels.len());
        labels.extend(std::iter::repeat(c).take(len));
        prev = c;
    }

    let sr = f64::from(SAMPLE_RATE);
    let n = n_frames * SAMPLES_PER_FRAME;
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let drift = rng.random_range(-0.08..0.08);
    let noise_seed: u64 = rng.random();
    let mut noise_rng = seed::rng(noise_seed);
    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let block = 80;
    let mut amps: Vec<f64> = Vec::new();
    let mut asp = 0.0;
    let mut lp = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let rel = i as f64 / n as f64;
        let f0 = spk.f0
            * (1.0 + 0.04 * (2.0 * PI * spk.vibrato_hz * t + phase0).sin())
            * (1.0 + drift * (rel - 0.5));
        phase += 2.0 * PI * f0 / sr;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
        if i % block == 0 {
            // Linear crossfade of the envelope over the first 10 ms of a frame.
            let frame = i / SAMPLES_PER_FRAME;
            let cur = &classes[labels[frame]];
            let before = &classes[labels[frame.saturating_sub(1)]];
            let pos = (i % SAMPLES_PER_FRAME) as f64 / 160.0;
            let mix = pos.min(1.0);
            let n_harm = ((7600.0 / f0).floor() as usize).max(1);
            amps.clear();
            for h in 1..=n_harm {
                let hz = h as f64 * f0;
                amps.push(mix * envelope(cur, spk, hz) + (1.0 - mix) * envelope(before, spk, hz));
            }
            asp = mix * cur.aspiration + (1.0 - mix) * before.aspiration;
        }
        let mut s = 0.0;
        for (h, a) in amps.iter().enumerate() {
            s += a * ((h + 1) as f64 * phase).sin();
        }
        // Aspiration: one-pole high-passed noise.
        let w: f64 = noise_rng.random_range(-1.0..1.0);
        let hp = w - lp;
        lp = 0.7 * lp + 0.3 * w;
        *o = s + asp * 2.0 * hp + 0.002 * w;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = rng.random_range(0.35..0.6) / peak;
    (out.iter().map(|v| (v * gain) as f32).collect(), labels)
}

/// Generates the corpus into `dir` (manifest at `dir/manifest.jsonl`, audio
/// under `dir/wavs/`). Pure in its arguments: the same spec writes
/// byte-identical files.
pub fn synth_corpus(spec: &CorpusSpec, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    if spec.n_speakers < 2 || spec.n_classes < 2 {
        return Err(Error::config("need at least 2 speakers and 2 content classes"));
    }
    let (lo, hi) = spec.dur_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::config(format!("invalid duration range {:?}", spec.dur_range)));
    }
    let frame_secs = SAMPLES_PER_FRAME as f64 / f64::from(SAMPLE_RATE);
    let min_frames = (lo / frame_secs).ceil() as usize;
    let max_frames = (hi / frame_secs).floor() as usize;
    if min_frames == 0 || max_frames < min_frames {
        return Err(Error::config("duration range admits no whole 20 ms frame count"));
    }
    let dir = dir.as_ref();
    let wav_dir = dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut rng = seed::rng(seed::derive(spec.seed, "corpus"));
    let speakers = draw_speakers(&mut rng, spec.n_speakers);
    let classes = draw_classes(&mut rng, spec.n_classes);

    let mut entries = Vec::with_capacity(spec.n_utts);
    for u in 0..spec.n_utts {
        let speaker = u % spec.n_speakers;
        let n_frames = rng.random_range(min_frames..=max_frames);
        let mut utt_rng = seed::rng(seed::derive_step(rng.random(), u as u64));
        let (samples, labels) = synth_utterance(&mut utt_rng, &speakers[speaker], &classes, n_frames);
        let id = format!("utt{u:05}");
        let rel = format!("wavs/{id}.wav");
        save_wav(dir.join(&rel), &Waveform::new(samples, SAMPLE_RATE)?)?;
        entries.push(ManifestEntry {
            id,
            path: rel,
            speaker,
            classes: labels,
            dur: n_frames as f64 * frame_secs,
        });
    }
    let manifest = CorpusManifest {
        entries,
        root: dir.to_path_buf(),
    };
    let mpath = dir.join("manifest.jsonl");
    manifest.save(&mpath)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorpusSpec {
        CorpusSpec {
            seed,
            n_speakers: 2,
            n_classes: 3,
            n_utts: 6,
            dur_range: (0.3, 0.6),
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_corpus(&small_spec(5), a.path()).unwrap();
        synth_corpus(&small_spec(5), b.path()).unwrap();
        for name in ["manifest.jsonl", "wavs/utt00000.wav", "wavs/utt00005.wav"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn manifest_contract() {
        let d = tempfile::tempdir().unwrap();
        let m = synth_corpus(&small_spec(1), d.path()).unwrap();
        assert_eq!(m.entries.len(), 6);
        let loaded = Corpus::load(d.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.manifest.entries, m.entries);
        for (e, w) in loaded.manifest.entries.iter().zip(&loaded.waves) {
            assert!(e.dur >= 0.3 - 1e-9 && e.dur <= 0.6 + 1e-9);
            assert_eq!(w.len(), e.classes.len() * SAMPLES_PER_FRAME);
            assert!(e.classes.iter().all(|&c| c < 3));
            assert!(w.samples().iter().all(|s| s.abs() <= 1.0));
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let d = tempfile::tempdir().unwrap();
        let mut s = small_spec(0);
        s.n_speakers = 1;
        assert!(matches!(synth_corpus(&s, d.path()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_data_error() {
        let d = tempfile::tempdir().unwrap();
        synth_corpus(&small_spec(2), d.path()).unwrap();
        fs::remove_file(d.path().join("wavs/utt00003.wav")).unwrap();
        assert!(matches!(
            CorpusManifest::load(d.path().join("manifest.jsonl")),
            Err(Error::Data(_))
        ));
    }
}
