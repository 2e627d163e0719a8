//! Reference classifiers trained on ground-truth synthetic audio: a content
//! classifier over log-mel context windows at the label rate, and a speaker
//! classifier whose pooled penultimate activations serve as embeddings.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{mel_spectrogram, Corpus, MelConfig, MelFilterbank, Split, Waveform};
use crate::error::{Error, Result};
use crate::nn::{gelu, AdamW, AdamWConfig, Linear, ParamStore};
use crate::seed;
use crate::train::Checkpoint;

const CLF_DTYPE: DType = DType::F32;
/// Mel frames per label frame.
const MEL_PER_LABEL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Label frames of context on each side of the classified frame.
    pub context: usize,
    pub content_hidden: usize,
    pub speaker_hidden: usize,
    pub content_steps: u64,
    pub speaker_steps: u64,
    pub content_batch: usize,
    pub speaker_batch: usize,
    /// Speaker training crop in mel frames.
    pub speaker_crop: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            context: 1,
            content_hidden: 128,
            speaker_hidden: 64,
            content_steps: 1500,
            speaker_steps: 600,
            content_batch: 256,
            speaker_batch: 8,
            speaker_crop: 100,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Frozen content and speaker classifiers with their input statistics.
pub struct ReferenceClassifiers {
    pub config: ClassifierConfig,
    pub n_classes: usize,
    pub n_speakers: usize,
    /// Per-frame content error of ground-truth held-out audio.
    pub content_heldout_error: f64,
    pub speaker_heldout_accuracy: f64,
    fb: MelFilterbank,
    mel_mean: Vec<f64>,
    mel_std: Vec<f64>,
    store: ParamStore,
    content: [Linear; 3],
    speaker: [Linear; 4],
}

impl std::fmt::Debug for ReferenceClassifiers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferenceClassifiers")
            .field("n_classes", &self.n_classes)
            .field("n_speakers", &self.n_speakers)
            .field("content_heldout_error", &self.content_heldout_error)
            .finish()
    }
}

fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut onehot = vec![0f32; n * k];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * k + t] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    Ok(((logp * onehot)?.sum_all()? / -(n as f64))?)
}

/// Most frequent value; ties go to the smallest.
fn majority(v: &[usize]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for &x in v {
        *counts.entry(x).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(x, _)| x)
}

impl ReferenceClassifiers {
    fn build(config: ClassifierConfig, n_classes: usize, n_speakers: usize, store: ParamStore, fb: MelFilterbank) -> Result<Self> {
        let m = fb.n_mels();
        let s = store.root();
        let cin = m * MEL_PER_LABEL * (2 * config.context + 1);
        let (ch, sh) = (config.content_hidden, config.speaker_hidden);
        let content = [
            Linear::new(&s.pp("content.0"), cin, ch)?,
            Linear::new(&s.pp("content.1"), ch, ch)?,
            Linear::new(&s.pp("content.2"), ch, n_classes)?,
        ];
        let speaker = [
            Linear::new(&s.pp("speaker.0"), m, sh)?,
            Linear::new(&s.pp("speaker.1"), sh, sh)?,
            Linear::new(&s.pp("speaker.2"), sh, sh)?,
            Linear::new(&s.pp("speaker.3"), sh, n_speakers)?,
        ];
        Ok(Self {
            config,
            n_classes,
            n_speakers,
            content_heldout_error: f64::NAN,
            speaker_heldout_accuracy: f64::NAN,
            mel_mean: vec![0.0; m],
            mel_std: vec![1.0; m],
            fb,
            store,
            content,
            speaker,
        })
    }

    fn log_mel(&self, wave: &Waveform) -> Result<Vec<Vec<f64>>> {
        let mel = mel_spectrogram(wave, &self.fb)?;
        Ok(mel
            .frames
            .into_iter()
            .map(|f| {
                f.iter()
                    .zip(self.mel_mean.iter().zip(&self.mel_std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect())
    }

    /// Context windows, one per label-rate frame: `[frames, cin]`.
    fn content_inputs(&self, mel: &[Vec<f64>]) -> Vec<Vec<f32>> {
        let frames = mel.len() / MEL_PER_LABEL;
        let c = self.config.context as i64;
        (0..frames as i64)
            .map(|i| {
                let mut row = Vec::new();
                for j in (i - c) * MEL_PER_LABEL as i64..(i + c + 1) * MEL_PER_LABEL as i64 {
                    let j = j.clamp(0, mel.len() as i64 - 1) as usize;
                    row.extend(mel[j].iter().map(|&v| v as f32));
                }
                row
            })
            .collect()
    }

    fn content_logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.content[0].forward(x)?)?;
        let h = gelu(&self.content[1].forward(&h)?)?;
        self.content[2].forward(&h)
    }

    /// Pooled penultimate activations for `[B, T, n_mels]` input.
    fn speaker_embedding_t(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.speaker[0].forward(x)?)?;
        let h = gelu(&self.speaker[1].forward(&h)?)?;
        let pooled = h.mean(1)?;
        self.speaker[2].forward(&pooled)
    }

    fn speaker_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.speaker[3].forward(&gelu(&self.speaker_embedding_t(x)?)?)
    }

    /// Trains both classifiers on the corpus train split and measures them
    /// on the held-out split.
    pub fn train(corpus: &Corpus, config: &ClassifierConfig) -> Result<Self> {
        let n_classes = corpus.n_classes();
        let n_speakers = corpus.n_speakers();
        if n_classes < 2 || n_speakers < 2 {
            return Err(Error::data("reference classifiers need at least two classes and two speakers"));
        }
        let fb = MelFilterbank::new(MelConfig::default())?;
        let store = ParamStore::new(seed::derive(config.seed, "classifiers.init"), CLF_DTYPE);
        let mut clf = Self::build(config.clone(), n_classes, n_speakers, store, fb)?;
        let train = corpus.indices(Split::Train);

        let raw: Vec<Vec<Vec<f64>>> = train
            .iter()
            .map(|&i| Ok(mel_spectrogram(&corpus.waves[i], &clf.fb)?.frames))
            .collect::<Result<_>>()?;
        let m = clf.fb.n_mels();
        let count: usize = raw.iter().map(Vec::len).sum();
        for c in 0..m {
            let mean = raw.iter().flatten().map(|f| f[c]).sum::<f64>() / count as f64;
            let var = raw.iter().flatten().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / count as f64;
            clf.mel_mean[c] = mean;
            clf.mel_std[c] = var.sqrt().max(1e-6);
        }
        let mels: Vec<Vec<Vec<f64>>> = train.iter().map(|&i| clf.log_mel(&corpus.waves[i])).collect::<Result<_>>()?;
        clf.fit_content(corpus, &train, &mels)?;
        clf.fit_speaker(corpus, &train, &mels)?;

        let test = corpus.indices(Split::Test);
        let mut err = 0.0;
        let mut correct = 0usize;
        for &i in &test {
            let e = &corpus.manifest.entries[i];
            err += clf.content_error(&corpus.waves[i], &e.classes)?;
            let logits = clf.speaker_logits(&clf.mel_tensor(&corpus.waves[i])?)?;
            let pred = logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?[0] as usize;
            correct += usize::from(pred == e.speaker);
        }
        clf.content_heldout_error = err / test.len().max(1) as f64;
        clf.speaker_heldout_accuracy = correct as f64 / test.len().max(1) as f64;
        log::info!(
            "reference classifiers: content error {:.3}, speaker accuracy {:.3}",
            clf.content_heldout_error,
            clf.speaker_heldout_accuracy
        );
        Ok(clf)
    }

    fn fit_content(&self, corpus: &Corpus, train: &[usize], mels: &[Vec<Vec<f64>>]) -> Result<()> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (&i, mel) in train.iter().zip(mels) {
            let classes = &corpus.manifest.entries[i].classes;
            for (f, row) in self.content_inputs(mel).into_iter().enumerate().take(classes.len()) {
                rows.push(row);
                labels.push(classes[f]);
            }
        }
        let cin = rows[0].len();
        let x = Tensor::from_vec(rows.concat(), (rows.len(), cin), &crate::nn::device())?;
        let vars: Vec<_> = self.store.vars().into_iter().filter(|(n, _)| n.starts_with("content.")).collect();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let stream = seed::derive(self.config.seed, "classifiers.content");
        for step in 0..self.config.content_steps {
            let mut rng = seed::rng(seed::derive_step(stream, step));
            let pick: Vec<u32> = (0..self.config.content_batch).map(|_| rng.random_range(0..labels.len()) as u32).collect();
            let targets: Vec<usize> = pick.iter().map(|&p| labels[p as usize]).collect();
            let idx = Tensor::from_vec(pick, self.config.content_batch, &crate::nn::device())?;
            let loss = cross_entropy(&self.content_logits(&x.index_select(&idx, 0)?)?, &targets)?;
            let mut g = loss.backward()?;
            opt.step(&vars, &mut g, self.config.lr)?;
        }
        Ok(())
    }

    fn fit_speaker(&self, corpus: &Corpus, train: &[usize], mels: &[Vec<Vec<f64>>]) -> Result<()> {
        let vars: Vec<_> = self.store.vars().into_iter().filter(|(n, _)| n.starts_with("speaker.")).collect();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let crop = self.config.speaker_crop.min(mels.iter().map(Vec::len).min().unwrap_or(0));
        if crop == 0 {
            return Err(Error::data("utterances too short for speaker training"));
        }
        let m = self.fb.n_mels();
        let stream = seed::derive(self.config.seed, "classifiers.speaker");
        for step in 0..self.config.speaker_steps {
            let mut rng = seed::rng(seed::derive_step(stream, step));
            let mut data = Vec::with_capacity(self.config.speaker_batch * crop * m);
            let mut targets = Vec::new();
            for _ in 0..self.config.speaker_batch {
                let k = rng.random_range(0..train.len());
                let start = rng.random_range(0..=mels[k].len() - crop);
                for f in &mels[k][start..start + crop] {
                    data.extend(f.iter().map(|&v| v as f32));
                }
                targets.push(corpus.manifest.entries[train[k]].speaker);
            }
            let x = Tensor::from_vec(data, (self.config.speaker_batch, crop, m), &crate::nn::device())?;
            let loss = cross_entropy(&self.speaker_logits(&x)?, &targets)?;
            let mut g = loss.backward()?;
            opt.step(&vars, &mut g, self.config.lr)?;
        }
        Ok(())
    }

    fn mel_tensor(&self, wave: &Waveform) -> Result<Tensor> {
        let mel = self.log_mel(wave)?;
        let m = self.fb.n_mels();
        let flat: Vec<f32> = mel.iter().flatten().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(flat, (1, mel.len(), m), &crate::nn::device())?)
    }

    /// Predicted content class per label-rate frame.
    pub fn predict_content(&self, wave: &Waveform) -> Result<Vec<usize>> {
        let rows = self.content_inputs(&self.log_mel(wave)?);
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let cin = rows[0].len();
        let x = Tensor::from_vec(rows.concat(), (rows.len(), cin), &crate::nn::device())?;
        let pred = self.content_logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        Ok(pred.into_iter().map(|p| p as usize).collect())
    }

    /// Fraction of frames whose segment is voted to the wrong class. Each run
    /// of identical true labels is one segment and takes the majority of its
    /// frame predictions.
    pub fn content_error(&self, wave: &Waveform, true_classes: &[usize]) -> Result<f64> {
        let pred = self.predict_content(wave)?;
        if pred.len().abs_diff(true_classes.len()) > 2 {
            return Err(Error::data(format!(
                "{} predicted frames against {} labels",
                pred.len(),
                true_classes.len()
            )));
        }
        let n = pred.len().min(true_classes.len());
        if n == 0 {
            return Err(Error::data("no frames to score"));
        }
        let mut wrong = 0usize;
        let mut start = 0;
        for t in 1..=n {
            if t == n || true_classes[t] != true_classes[start] {
                if majority(&pred[start..t]) != true_classes[start] {
                    wrong += t - start;
                }
                start = t;
            }
        }
        Ok(wrong as f64 / n as f64)
    }

    pub fn speaker_embedding(&self, wave: &Waveform) -> Result<Vec<f64>> {
        let e = self.speaker_embedding_t(&self.mel_tensor(wave)?)?;
        Ok(e.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Cosine between speaker embeddings.
    pub fn speaker_sim(&self, a: &Waveform, b: &Waveform) -> Result<f64> {
        let (ea, eb) = (self.speaker_embedding(a)?, self.speaker_embedding(b)?);
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "classifiers",
            "config": self.config,
            "n_classes": self.n_classes,
            "n_speakers": self.n_speakers,
            "content_heldout_error": self.content_heldout_error,
            "speaker_heldout_accuracy": self.speaker_heldout_accuracy,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
        }));
        c.insert_group("clf", self.store.tensors()?);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let kind: String = c.meta("kind")?;
        if kind != "classifiers" {
            return Err(Error::data(format!("checkpoint kind `{kind}` is not `classifiers`")));
        }
        let fb = MelFilterbank::new(MelConfig::default())?;
        let mut clf = Self::build(c.meta("config")?, c.meta("n_classes")?, c.meta("n_speakers")?, ParamStore::new(0, CLF_DTYPE), fb)?;
        clf.store.load(&c.group("clf"), true)?;
        clf.mel_mean = c.meta("mel_mean")?;
        clf.mel_std = c.meta("mel_std")?;
        clf.content_heldout_error = c.meta("content_heldout_error")?;
        clf.speaker_heldout_accuracy = c.meta("speaker_heldout_accuracy")?;
        Ok(clf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;

    #[test]
    fn majority_vote_ties_to_smallest() {
        assert_eq!(majority(&[3, 1, 3, 1]), 1);
        assert_eq!(majority(&[2, 2, 5]), 2);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let l = Tensor::from_vec(vec![1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0], (2, 3), &crate::nn::device()).unwrap();
        let got = scalar(&cross_entropy(&l, &[1, 2]).unwrap()).unwrap();
        let lse = |v: [f64; 3]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
        let want = ((lse([1.0, 2.0, 0.5]) - 2.0) + (lse([-1.0, 0.0, 3.0]) - 3.0)) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }
}
