//! Multi-step recipes shared by the subcommands and the acceptance suite.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ablation_row, RunConfig};
use crate::adapter::{Bottleneck, LatentMode};
use crate::audio::{Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{eval_reconstruction, linear_probe, segment_pool, silhouette, ProbeOutcome, ReferenceClassifiers};
use crate::features::FrameMatrix;
use crate::generator::{Arm, CfmModel, LatentCorpus, SamplerConfig};
use crate::seed;
use crate::train::{load_encoder, train_stage, Checkpoint, Pipeline, RunSink, StepMetrics, TrainState};

/// What [`export_corpus`] writes per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    /// Compressed latents.
    Latents,
    /// Encoder features before compression.
    Features,
}

pub fn export_corpus(pipeline: &Pipeline, corpus: &Corpus, split: Split, kind: ExportKind) -> Result<LatentCorpus> {
    LatentCorpus::from_corpus(corpus, split, |w| match kind {
        ExportKind::Latents => pipeline.latent(w),
        ExportKind::Features => pipeline.features(w),
    })
}

/// How much content and speaker information a set of sequences exposes to a
/// linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProbes {
    /// Content class of each segment-pooled run of frames.
    pub content: ProbeOutcome,
    /// Speaker of each utterance-pooled sequence.
    pub speaker: ProbeOutcome,
    /// Silhouette of the segment vectors under their content labels.
    pub content_silhouette: f64,
    pub segments: usize,
}

/// Segment-pooled vectors with their content labels and display ids.
pub fn segment_vectors(corpus: &LatentCorpus) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let (mut xs, mut ys, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for item in &corpus.items {
        for (k, (v, c)) in segment_pool(&item.frames, &item.classes)?.into_iter().enumerate() {
            xs.push(v);
            ys.push(c);
            ids.push(format!("{}:{k}", item.id));
        }
    }
    Ok((xs, ys, ids))
}

pub fn probe_corpus(corpus: &LatentCorpus, probe_seed: u64) -> Result<LatentProbes> {
    if corpus.is_empty() {
        return Err(Error::data("nothing to probe"));
    }
    let (xs, ys, _) = segment_vectors(corpus)?;
    let content = linear_probe(&xs, &ys, seed::derive(probe_seed, "content"))?;
    let content_silhouette = silhouette(&xs, &ys)?;
    let utt: Vec<Vec<f64>> = corpus.items.iter().map(|i| i.frames.mean_pool(0, i.frames.frames())).collect();
    let spk: Vec<usize> = corpus.items.iter().map(|i| i.speaker).collect();
    let speaker = linear_probe(&utt, &spk, seed::derive(probe_seed, "speaker"))?;
    Ok(LatentProbes {
        content,
        speaker,
        content_silhouette,
        segments: xs.len(),
    })
}

/// Turns a generated sequence into audio. Latent-arm samples are decoded
/// directly; raw-feature samples first pass through the compressor.
pub fn render_sample(arm: Arm, pipeline: &Pipeline, sample: &FrameMatrix) -> Result<crate::audio::Waveform> {
    match arm {
        Arm::Latent => pipeline.decode(sample, None),
        Arm::Raw => {
            let z = pipeline.adapter.compress_frames(sample, LatentMode::Eval)?;
            pipeline.decode(&z, Some(sample.frames()))
        }
    }
}

/// Mean content error of decoded samples, conditioned on the label sequences
/// of the first `n` items of `targets`. `labels` maps ids to 50 Hz labels.
pub fn generated_content_error(
    model: &CfmModel,
    arm: Arm,
    pipeline: &Pipeline,
    targets: &LatentCorpus,
    labels: &HashMap<String, Vec<usize>>,
    clf: &ReferenceClassifiers,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<f64> {
    let items: Vec<_> = targets.items.iter().take(n).collect();
    if items.is_empty() {
        return Err(Error::data("no target sequences to condition on"));
    }
    let mut total = 0.0;
    for (k, item) in items.iter().enumerate() {
        let s = SamplerConfig {
            seed: seed::derive_step(sampler.seed, k as u64),
            ..sampler.clone()
        };
        let x = model.generate(&item.classes, None, &s)?;
        let wave = render_sample(arm, pipeline, &x)?;
        let truth = labels
            .get(&item.id)
            .ok_or_else(|| Error::data(format!("no labels for {}", item.id)))?;
        total += clf.content_error(&wave, truth)?;
    }
    Ok(total / items.len() as f64)
}

pub fn label_map(corpus: &Corpus) -> HashMap<String, Vec<usize>> {
    corpus
        .manifest
        .entries
        .iter()
        .map(|e| (e.id.clone(), e.classes.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub bottleneck: Bottleneck,
    pub frame_rate: u32,
    pub latent_dim: usize,
    /// 0 means the last encoder layer.
    pub tap_layer: usize,
    pub compression_ratio: f64,
    /// Held-out reconstruction metrics after stage 2.
    pub metrics: BTreeMap<String, f64>,
    pub content_probe_accuracy: f64,
    pub stage1_last: Option<StepMetrics>,
    pub stage2_last: Option<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub rows: Vec<AblationResult>,
}

/// Runs both stages for each configured row and scores the result the same
/// way for every row. Per-row checkpoints and logs go under `dir` when given.
pub fn run_ablation(
    base: &RunConfig,
    corpus: &Corpus,
    encoder: &Checkpoint,
    clf: &ReferenceClassifiers,
    dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for name in &base.ablation.rows {
        let c = ablation_row(base, name)?;
        log::info!("ablation row {name}");
        let sink = |stage: &str| -> Result<RunSink> {
            Ok(match dir {
                Some(d) => {
                    let ck = d.join(name).join(stage);
                    std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
                    RunSink {
                        metrics: Some(d.join(name).join(format!("{stage}.jsonl"))),
                        checkpoints: Some(ck),
                    }
                }
                None => RunSink::default(),
            })
        };
        let enc = load_encoder(&c.encoder, encoder, "encoder")?;
        let mut s1 = TrainState::stage1(c.model(), c.stage1.clone(), &enc)?;
        let log1 = train_stage(&mut s1, corpus, &sink("stage1")?, None)?;
        let mut s2 = TrainState::stage2(&s1.to_checkpoint()?, c.stage2.clone())?;
        drop(s1);
        let log2 = train_stage(&mut s2, corpus, &sink("stage2")?, None)?;
        let reference = s2.reference.clone_frozen()?;
        let pipeline = Pipeline::from_state(s2);
        let report = eval_reconstruction(&pipeline, Some(&reference), corpus, Split::Test, clf, "ablation", &c.hash()?)?;
        let latents = export_corpus(&pipeline, corpus, Split::All, ExportKind::Latents)?;
        let (xs, ys, _) = segment_vectors(&latents)?;
        let probe = linear_probe(&xs, &ys, seed::derive(c.eval.probe_seed, "content"))?;
        rows.push(AblationResult {
            row: name.clone(),
            bottleneck: c.adapter.bottleneck,
            frame_rate: c.adapter.frame_rate,
            latent_dim: c.adapter.d_z,
            tap_layer: c.encoder.tap_layer,
            compression_ratio: c.adapter.compression_ratio(),
            metrics: report.metrics,
            content_probe_accuracy: probe.accuracy,
            stage1_last: log1.last().cloned(),
            stage2_last: log2.last().cloned(),
        });
    }
    Ok(AblationReport {
        config_hash: base.hash()?,
        stage1_steps: base.ablation.stage1_steps,
        stage2_steps: base.ablation.stage2_steps,
        rows,
    })
}

impl AblationReport {
    /// One line per row with the shared metric columns.
    pub fn table(&self) -> String {
        let cols = ["stoi", "mel_l1", "semantic_retention", "toy_content_error", "toy_speaker_sim"];
        let mut out = format!("{:<4} {:<10} {:>4} {:>4} {:>4}", "row", "bottleneck", "hz", "dim", "tap");
        for c in cols {
            out.push_str(&format!(" {c:>18}"));
        }
        out.push_str(&format!(" {:>14}\n", "content_probe"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<4} {:<10} {:>4} {:>4} {:>4}",
                r.row,
                format!("{:?}", r.bottleneck),
                r.frame_rate,
                r.latent_dim,
                r.tap_layer
            ));
            for c in cols {
                out.push_str(&format!(" {:>18.4}", r.metrics.get(c).copied().unwrap_or(f64::NAN)));
            }
            out.push_str(&format!(" {:>14.4}\n", r.content_probe_accuracy));
        }
        out
    }
}
