use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticWeights, DecoderConfig, DiscriminatorConfig};
use crate::adapter::AdapterConfig;
use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::features::EncoderConfig;
use crate::nn::AdamWConfig;

/// Architecture of every model in the pipeline. The adapter is the source of
/// truth for the latent width and frame rate; [`ModelConfig::resolved`]
/// propagates them to the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub discriminators: DiscriminatorConfig,
    pub mel: MelConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            discriminators: DiscriminatorConfig::default(),
            mel: MelConfig::default(),
        }
        .resolved()
    }
}

impl ModelConfig {
    /// Copies derived widths and rates into the dependent sections.
    pub fn resolved(mut self) -> Self {
        self.adapter.d_s = self.encoder.d_s;
        self.decoder.d_z = self.adapter.d_z;
        self.decoder.frame_rate = self.adapter.frame_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.decoder.validate()?;
        self.discriminators.validate()?;
        self.mel.validate()?;
        if self.adapter.d_s != self.encoder.d_s {
            return Err(Error::config(format!(
                "adapter width {} differs from encoder width {}",
                self.adapter.d_s, self.encoder.d_s
            )));
        }
        if self.decoder.d_z != self.adapter.d_z || self.decoder.frame_rate != self.adapter.frame_rate {
            return Err(Error::config("decoder latent width/rate differ from the adapter's"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// 1 or 2.
    pub stage: u8,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weights: AcousticWeights,
    pub lambda_sem: f64,
    /// First step at which adversarial and feature-matching terms are used.
    pub adversarial_start: u64,
    pub batch: usize,
    /// Crop length in 50 Hz frames.
    pub crop_frames: usize,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Stage 2 only: fresh discriminators instead of the stage-1 ones.
    pub reinit_discriminators: bool,
    /// Stage 2 only: train a copy of the encoder. Off when features come
    /// from files and no gradient can reach the encoder.
    pub finetune_encoder: bool,
    pub optimizer: AdamWConfig,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            total_steps: 100_000,
            warmup_steps: 5000,
            peak_lr: 1e-4,
            weights: AcousticWeights::default(),
            lambda_sem: 1.0,
            adversarial_start: 5000,
            batch: 8,
            crop_frames: 50,
            seed: 0,
            log_every: 1,
            checkpoint_every: 1000,
            reinit_discriminators: false,
            finetune_encoder: true,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            adversarial_start: 0,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup {} must be shorter than the {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        self.weights.validate()?;
        if !(self.lambda_sem >= 0.0) || !(self.peak_lr >= 0.0) {
            return Err(Error::config("lambda_sem and peak_lr must be non-negative"));
        }
        if self.batch == 0 || self.crop_frames < 8 {
            return Err(Error::config("batch must be positive and crops at least 8 frames"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("log and checkpoint intervals must be positive"));
        }
        Ok(())
    }

    pub fn adversarial_at(&self, step: u64) -> bool {
        step >= self.adversarial_start
    }
}
