use serde::{Deserialize, Serialize};

use super::corpus::LatentCorpus;
use super::train::{train_cfm, CfmConfig, CfmModel, CurvePoint};
use crate::error::{Error, Result};

/// Large-scale numbers for the same comparison, carried in every report for
/// context. They are not reproduced at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNumbers {
    pub raw_dim: usize,
    pub raw_dit_params: String,
    pub raw_wer_percent: f64,
    pub raw_sim: f64,
    pub latent_dim: usize,
    pub latent_dit_params: String,
    pub latent_wer_percent: f64,
    pub latent_sim: f64,
}

impl Default for ReferenceNumbers {
    fn default() -> Self {
        Self {
            raw_dim: 1024,
            raw_dit_params: "338.7M".into(),
            raw_wer_percent: 110.28,
            raw_sim: 0.09,
            latent_dim: 128,
            latent_dit_params: "335.9M".into(),
            latent_wer_percent: 1.86,
            latent_sim: 0.68,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Raw,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub dim: usize,
    pub curve: Vec<CurvePoint>,
    pub content_error: Option<f64>,
}

impl ArmRun {
    pub fn final_normalized(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.normalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusabilityReport {
    pub reference: ReferenceNumbers,
    pub runs: Vec<ArmRun>,
    /// Seeds where the latent arm ends at a lower normalized loss.
    pub latent_wins: usize,
    pub seeds: usize,
    pub loss_ordering_holds: bool,
    pub mean_content_error_raw: Option<f64>,
    pub mean_content_error_latent: Option<f64>,
    pub content_ordering_holds: Option<bool>,
}

/// Scores a trained arm, typically by decoding samples and classifying them.
pub type ArmScorer<'a> = dyn FnMut(Arm, u64, &CfmModel) -> Result<f64> + 'a;

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains matched DiTs on both corpora for every seed. Only the target width
/// differs between arms.
pub fn diffusability_probe(
    raw: &LatentCorpus,
    latent: &LatentCorpus,
    cfg: &CfmConfig,
    seeds: &[u64],
    mut scorer: Option<&mut ArmScorer<'_>>,
) -> Result<DiffusabilityReport> {
    if raw.ids() != latent.ids() {
        return Err(Error::data("both arms must cover the same utterances in the same order"));
    }
    if seeds.is_empty() {
        return Err(Error::config("diffusability probe needs at least one seed"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for (arm, corpus) in [(Arm::Raw, raw), (Arm::Latent, latent)] {
            let mut c = cfg.clone();
            c.seed = seed;
            log::info!("diffusability: {arm:?} arm, seed {seed}");
            let out = train_cfm(&c, corpus)?;
            let content_error = match scorer.as_mut() {
                Some(f) => Some(f(arm, seed, &out.model)?),
                None => None,
            };
            runs.push(ArmRun {
                arm,
                seed,
                dim: corpus.dim()?,
                curve: out.curve,
                content_error,
            });
        }
    }
    let latent_wins = runs
        .chunks(2)
        .filter(|p| p[1].final_normalized() < p[0].final_normalized())
        .count();
    let errs = |arm| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.content_error)
            .collect()
    };
    let (er, el) = (mean(&errs(Arm::Raw)), mean(&errs(Arm::Latent)));
    Ok(DiffusabilityReport {
        reference: ReferenceNumbers::default(),
        latent_wins,
        seeds: seeds.len(),
        loss_ordering_holds: 2 * latent_wins > seeds.len(),
        mean_content_error_raw: er,
        mean_content_error_latent: el,
        content_ordering_holds: er.zip(el).map(|(r, l)| l < r),
        runs,
    })
}
