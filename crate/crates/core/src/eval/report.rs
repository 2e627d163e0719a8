use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifiers::ReferenceClassifiers;
use super::metrics::semantic_retention;
use super::stoi::stoi;
use crate::audio::{mel_spectrogram, Corpus, MelConfig, MelFilterbank, Split, Waveform};
use crate::error::{Error, Result};
use crate::features::EncoderWeights;
use crate::train::Pipeline;

/// Large-scale reconstruction numbers for the same pipeline, kept in every
/// report for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReference {
    pub stoi: f64,
    pub sim: f64,
    pub ground_truth_stoi: f64,
}

impl Default for ReconstructionReference {
    fn default() -> Self {
        Self {
            stoi: 0.97,
            sim: 0.94,
            ground_truth_stoi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    pub stoi: f64,
    pub mel_l1: f64,
    pub retention: f64,
    pub content_error: f64,
    pub speaker_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: ReconstructionReference,
    pub corpus_id: String,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub utterances: Vec<UtteranceEval>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::data(format!("report has no metric `{name}`")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Fixed-column summary, one metric per line.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<24} {:>12}\n", "metric", "value");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<24} {v:>12.6}\n"));
        }
        out
    }
}

/// Mean absolute log-mel difference over the common frames.
pub fn mel_distance(fb: &MelFilterbank, a: &Waveform, b: &Waveform) -> Result<f64> {
    let (ma, mb) = (mel_spectrogram(a, fb)?, mel_spectrogram(b, fb)?);
    let n = ma.num_frames().min(mb.num_frames());
    if n == 0 {
        return Err(Error::data("no mel frames to compare"));
    }
    let mut total = 0.0;
    for f in 0..n {
        total += ma.frames[f].iter().zip(&mb.frames[f]).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / (n * fb.n_mels()) as f64)
}

fn truncate(w: &Waveform, len: usize) -> Result<Waveform> {
    Waveform::new(w.samples()[..len.min(w.len())].to_vec(), w.sample_rate())
}

/// Runs encode, compress and decode over one split and scores every
/// utterance. `reference` is the frozen encoder the retention metric
/// compares against; without it the pipeline encoder is its own reference.
pub fn eval_reconstruction(
    pipeline: &Pipeline,
    reference: Option<&EncoderWeights>,
    corpus: &Corpus,
    split: Split,
    clf: &ReferenceClassifiers,
    corpus_id: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let fb = MelFilterbank::new(MelConfig::default())?;
    let mut utterances = Vec::new();
    for i in corpus.indices(split) {
        let e = &corpus.manifest.entries[i];
        let clean = &corpus.waves[i];
        let recon = pipeline.reconstruct(clean)?;
        let clean_t = truncate(clean, recon.len())?;
        let f_adapt = pipeline.features(clean)?;
        let retention = match reference {
            Some(r) => semantic_retention(&r.encode(clean)?, &f_adapt)?,
            None => 1.0,
        };
        utterances.push(UtteranceEval {
            id: e.id.clone(),
            stoi: stoi(&clean_t, &recon)?,
            mel_l1: mel_distance(&fb, &clean_t, &recon)?,
            retention,
            content_error: clf.content_error(&recon, &e.classes)?,
            speaker_sim: clf.speaker_sim(clean, &recon)?,
        });
    }
    if utterances.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    let n = utterances.len() as f64;
    let mean = |f: fn(&UtteranceEval) -> f64| utterances.iter().map(f).sum::<f64>() / n;
    let mut metrics = BTreeMap::new();
    metrics.insert("stoi".into(), mean(|u| u.stoi));
    metrics.insert("mel_l1".into(), mean(|u| u.mel_l1));
    metrics.insert("semantic_retention".into(), mean(|u| u.retention));
    metrics.insert("toy_content_error".into(), mean(|u| u.content_error));
    metrics.insert("toy_speaker_sim".into(), mean(|u| u.speaker_sim));
    metrics.insert("reference_content_error".into(), clf.content_heldout_error);
    if let Some((k, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::numeric(format!("metric `{k}` is not finite")));
    }
    Ok(EvalReport {
        reference: ReconstructionReference::default(),
        corpus_id: corpus_id.into(),
        config_hash: config_hash.into(),
        metrics,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_losslessly() {
        let r = EvalReport {
            reference: ReconstructionReference::default(),
            corpus_id: "toy".into(),
            config_hash: "ab12".into(),
            metrics: [("stoi".to_string(), 0.812_345_678_901_234_5), ("mel_l1".to_string(), 1.0 / 3.0)].into(),
            utterances: vec![UtteranceEval {
                id: "u0".into(),
                stoi: 0.1 + 0.2,
                mel_l1: 1e-300,
                retention: -0.0,
                content_error: 0.125,
                speaker_sim: 0.9999999999999999,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
        assert!(r.summary_table().contains("stoi"));
    }
}
