//! Seeded crop batches drawn from a corpus split.
//!
//! The batch for step `n` depends only on `(stream seed, n)`, so resumed runs
//! see exactly the batches an uninterrupted run would have seen.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::audio::{Corpus, Split, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::seed;

/// One training batch of fixed-length crops.
#[derive(Debug, Clone)]
pub struct CropBatch {
    /// `[B, crop_frames * 320]`.
    pub audio: Tensor,
    /// Corpus index of each row.
    pub utterances: Vec<usize>,
    /// First 50 Hz frame of each crop.
    pub offsets: Vec<usize>,
    /// Per-frame content labels of each crop, `crop_frames` long.
    pub labels: Vec<Vec<usize>>,
    pub speakers: Vec<usize>,
    pub crop_frames: usize,
}

#[derive(Debug, Clone)]
pub struct CropSampler {
    indices: Vec<usize>,
    stream: u64,
    batch: usize,
    crop_frames: usize,
}

impl CropSampler {
    pub fn new(corpus: &Corpus, split: Split, batch: usize, crop_frames: usize, stream: u64) -> Result<Self> {
        let indices = corpus.indices(split);
        if indices.is_empty() {
            return Err(Error::data("corpus split is empty"));
        }
        if batch == 0 || crop_frames == 0 {
            return Err(Error::config("batch size and crop length must be positive"));
        }
        Ok(Self {
            indices,
            stream,
            batch,
            crop_frames,
        })
    }

    pub fn batch_at(&self, corpus: &Corpus, step: u64, dtype: DType) -> Result<CropBatch> {
        let mut rng = seed::rng(seed::derive_step(self.stream, step));
        let picks: Vec<(usize, usize)> = (0..self.batch)
            .map(|_| {
                let u = self.indices[rng.random_range(0..self.indices.len())];
                let frames = corpus.manifest.entries[u].classes.len();
                let max_off = frames.saturating_sub(self.crop_frames);
                (u, rng.random_range(0..=max_off))
            })
            .collect();
        crop_batch(corpus, &picks, self.crop_frames, dtype)
    }
}

/// Builds a batch from explicit `(utterance, frame offset)` picks; crops that
/// run past the end are zero-padded and their labels repeat the last frame.
pub fn crop_batch(corpus: &Corpus, picks: &[(usize, usize)], crop_frames: usize, dtype: DType) -> Result<CropBatch> {
    let len = crop_frames * SAMPLES_PER_FRAME;
    let mut audio = Vec::with_capacity(picks.len() * len);
    let mut labels = Vec::with_capacity(picks.len());
    let mut speakers = Vec::with_capacity(picks.len());
    for &(u, off) in picks {
        let seg = corpus.waves[u].segment(off * SAMPLES_PER_FRAME, len)?;
        audio.extend_from_slice(seg.samples());
        let e = &corpus.manifest.entries[u];
        let last = *e.classes.last().ok_or_else(|| Error::data("utterance without labels"))?;
        labels.push(
            (off..off + crop_frames)
                .map(|t| e.classes.get(t).copied().unwrap_or(last))
                .collect(),
        );
        speakers.push(e.speaker);
    }
    Ok(CropBatch {
        audio: Tensor::from_vec(audio, (picks.len(), len), &crate::nn::device())?.to_dtype(dtype)?,
        utterances: picks.iter().map(|p| p.0).collect(),
        offsets: picks.iter().map(|p| p.1).collect(),
        labels,
        speakers,
        crop_frames,
    })
}
