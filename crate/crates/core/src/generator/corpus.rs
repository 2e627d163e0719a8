use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::{Corpus, Split, Waveform};
use crate::error::{Error, Result};
use crate::features::{load_features, save_features, FrameMatrix};

/// Label rate of the synthetic corpus.
const LABEL_RATE: u32 = 50;
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct LatentItem {
    pub id: String,
    pub speaker: usize,
    pub frames: FrameMatrix,
    /// One content class per frame, at the sequence's own rate.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelLine {
    id: String,
    speaker: usize,
    classes: Vec<usize>,
}

/// Target sequences with per-frame content labels, in corpus order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentCorpus {
    pub items: Vec<LatentItem>,
}

/// Resamples 50 Hz labels to `rate` by taking the label at each frame's start.
pub fn labels_at_rate(classes: &[usize], rate: u32, frames: usize) -> Result<Vec<usize>> {
    if rate == 0 || LABEL_RATE % rate != 0 {
        return Err(Error::config(format!("no label mapping for {rate} Hz sequences")));
    }
    let step = (LABEL_RATE / rate) as usize;
    if classes.is_empty() {
        return Err(Error::data("utterance has no labels"));
    }
    Ok((0..frames)
        .map(|i| classes[(i * step).min(classes.len() - 1)])
        .collect())
}

impl LatentCorpus {
    /// Maps every utterance in `split` through `encode` and attaches labels.
    pub fn from_corpus(corpus: &Corpus, split: Split, mut encode: impl FnMut(&Waveform) -> Result<FrameMatrix>) -> Result<Self> {
        let mut items = Vec::new();
        for i in corpus.indices(split) {
            let e = &corpus.manifest.entries[i];
            let frames = encode(&corpus.waves[i])?;
            let classes = labels_at_rate(&e.classes, frames.frame_rate(), frames.frames())?;
            items.push(LatentItem {
                id: e.id.clone(),
                speaker: e.speaker,
                frames,
                classes,
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Result<usize> {
        let first = self.items.first().ok_or_else(|| Error::data("empty latent corpus"))?;
        let d = first.frames.dim();
        if self.items.iter().any(|it| it.frames.dim() != d) {
            return Err(Error::data("latent corpus mixes channel counts"));
        }
        Ok(d)
    }

    pub fn frame_rate(&self) -> Result<u32> {
        let first = self.items.first().ok_or_else(|| Error::data("empty latent corpus"))?;
        Ok(first.frames.frame_rate())
    }

    pub fn n_classes(&self) -> usize {
        self.items
            .iter()
            .flat_map(|it| it.classes.iter().map(|c| c + 1))
            .max()
            .unwrap_or(0)
    }

    /// Items at positions kept by `split` (same rule as the audio corpus).
    pub fn subset(&self, split: Split) -> Self {
        Self {
            items: self
                .items
                .iter()
                .enumerate()
                .filter(|(i, _)| split.contains(*i))
                .map(|(_, it)| it.clone())
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|it| it.id.as_str()).collect()
    }

    /// Writes `{id}.wcub` per item plus the labels sidecar.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let sidecar = dir.join(LABELS_FILE);
        let mut out = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        for it in &self.items {
            save_features(dir.join(format!("{}.wcub", it.id)), &it.frames)?;
            let line = serde_json::to_string(&LabelLine {
                id: it.id.clone(),
                speaker: it.speaker,
                classes: it.classes.clone(),
            })?;
            writeln!(out, "{line}").map_err(|e| Error::io(&sidecar, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: LabelLine = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", sidecar.display(), n + 1)))?;
            let frames = load_features(dir.join(format!("{}.wcub", l.id)))?;
            if frames.frames() != l.classes.len() {
                return Err(Error::data(format!(
                    "{}: {} frames but {} labels",
                    l.id,
                    frames.frames(),
                    l.classes.len()
                )));
            }
            items.push(LatentItem {
                id: l.id,
                speaker: l.speaker,
                frames,
                classes: l.classes,
            });
        }
        Ok(Self { items })
    }
}

/// Per-channel standardization with statistics from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(corpus: &LatentCorpus) -> Result<Self> {
        let d = corpus.dim()?;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for it in &corpus.items {
            for row in it.frames.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::data("need at least two frames for normalization statistics"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn stats(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let dev = crate::nn::device();
        let d = self.dim();
        Ok((
            Tensor::from_vec(self.mean.clone(), d, &dev)?.to_dtype(dtype)?,
            Tensor::from_vec(self.std.clone(), d, &dev)?.to_dtype(dtype)?,
        ))
    }

    /// `(x - mean) / std` over the last dimension.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.stats(x.dtype())?;
        Ok(x.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.stats(x.dtype())?;
        Ok(x.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_resampling() {
        let c = [0, 1, 2, 3, 4, 5];
        assert_eq!(labels_at_rate(&c, 50, 6).unwrap(), c.to_vec());
        assert_eq!(labels_at_rate(&c, 25, 3).unwrap(), vec![0, 2, 4]);
        assert!(matches!(labels_at_rate(&c, 30, 3), Err(Error::Config(_))));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = LatentCorpus {
            items: (0..3)
                .map(|i| LatentItem {
                    id: format!("u{i}"),
                    speaker: i % 2,
                    frames: FrameMatrix::new(vec![i as f32; 8], 4, 2, 25).unwrap(),
                    classes: vec![i, 1, 0, 2],
                })
                .collect(),
        };
        corpus.save(dir.path()).unwrap();
        assert_eq!(LatentCorpus::load(dir.path()).unwrap(), corpus);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(vals in prop::collection::vec(-50.0f64..50.0, 12), m in -3.0f64..3.0, s in 0.1f64..5.0) {
            let n = Normalizer { mean: vec![m, -m, 0.5], std: vec![s, 1.0, 2.0 * s] };
            let x = Tensor::from_vec(vals.clone(), (1, 4, 3), &crate::nn::device()).unwrap();
            let back = n.denormalize(&n.normalize(&x).unwrap()).unwrap();
            let back = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in vals.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
