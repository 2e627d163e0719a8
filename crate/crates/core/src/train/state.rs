use std::collections::BTreeMap;

use candle_core::{DType, Var};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, StageConfig};
use crate::acoustic::{DecoderWeights, DiscriminatorSet};
use crate::adapter::{init_compressor_from_encoder, AdapterWeights, LatentMode};
use crate::audio::{MelFilterbank, Waveform, SAMPLES_PER_FRAME};
use crate::error::{Error, Result};
use crate::features::{EncoderConfig, EncoderWeights, FeatureSequence, Latent};
use crate::nn::dsp::TensorMel;
use crate::nn::{AdamW, AdamWState, ParamStore};
use crate::seed;

/// Training runs in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

pub const GROUP_ENCODER: &str = "encoder_adapted";
pub const GROUP_COMPRESSOR: &str = "compressor";
pub const GROUP_RESTORER: &str = "restorer";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_DISCRIMINATORS: &str = "discriminators";
/// Checkpoint prefix of the frozen reference encoder (never optimized).
pub const REFERENCE: &str = "reference";

fn prefixed(group: &str, vars: Vec<(String, Var)>) -> Vec<(String, Var)> {
    vars.into_iter().map(|(n, v)| (format!("{group}.{n}"), v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    stage: StageConfig,
    model: ModelConfig,
    step: u64,
    /// Batch and noise draws are pure functions of `(seed, step)`.
    rng: RngMeta,
    opt_steps: BTreeMap<String, BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngMeta {
    seed: u64,
    batch_stream: u64,
    latent_stream: u64,
}

/// Everything a stage owns: models, optimizer moments and the step counter.
pub struct TrainState {
    pub stage: StageConfig,
    pub model: ModelConfig,
    /// Frozen reference encoder producing the anchoring targets.
    pub reference: EncoderWeights,
    /// Trainable encoder copy (stage 2 only).
    pub adapted: Option<EncoderWeights>,
    pub adapter: AdapterWeights,
    pub decoder: DecoderWeights,
    pub discriminators: DiscriminatorSet,
    pub(crate) gen_opt: AdamW,
    pub(crate) disc_opt: AdamW,
    /// Completed steps.
    pub step: u64,
    pub(crate) mel: TensorMel,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("stage", &self.stage.stage)
            .field("step", &self.step)
            .finish()
    }
}

impl TrainState {
    /// Fresh stage-1 state around a (pretrained) encoder, which becomes the
    /// frozen reference.
    pub fn stage1(model: ModelConfig, stage: StageConfig, encoder: &EncoderWeights) -> Result<Self> {
        model.validate()?;
        stage.validate()?;
        if stage.stage != 1 {
            return Err(Error::config("stage-1 state needs a stage-1 config"));
        }
        if encoder.config != model.encoder {
            return Err(Error::config("encoder weights do not match the encoder config"));
        }
        let reference = encoder.clone_frozen()?;
        let s = stage.seed;
        let adapter = AdapterWeights::new(model.adapter.clone(), seed::derive(s, "adapter"), TRAIN_DTYPE)?;
        if model.adapter.init_from_encoder {
            init_compressor_from_encoder(&adapter, &reference)?;
        }
        let decoder = DecoderWeights::new(model.decoder.clone(), seed::derive(s, "decoder"), TRAIN_DTYPE)?;
        let discriminators =
            DiscriminatorSet::new(model.discriminators.clone(), seed::derive(s, "discriminators"), TRAIN_DTYPE)?;
        Self::assemble(stage, model, reference, None, adapter, decoder, discriminators)
    }

    /// Stage-2 state from a stage-1 checkpoint: adapter, decoder and
    /// discriminators carry over, the encoder copy starts from the frozen
    /// reference, optimizers and the schedule restart.
    pub fn stage2(stage1: &Checkpoint, stage: StageConfig) -> Result<Self> {
        stage.validate()?;
        if stage.stage != 2 {
            return Err(Error::config("stage-2 state needs a stage-2 config"));
        }
        let prev = Self::from_checkpoint(stage1)?;
        let reference = prev.reference;
        let adapted = if stage.finetune_encoder {
            Some(reference.clone_frozen()?)
        } else {
            None
        };
        let discriminators = if stage.reinit_discriminators {
            DiscriminatorSet::new(
                prev.model.discriminators.clone(),
                seed::derive(stage.seed, "discriminators"),
                TRAIN_DTYPE,
            )?
        } else {
            prev.discriminators
        };
        Self::assemble(stage, prev.model, reference, adapted, prev.adapter, prev.decoder, discriminators)
    }

    fn assemble(
        stage: StageConfig,
        model: ModelConfig,
        reference: EncoderWeights,
        adapted: Option<EncoderWeights>,
        adapter: AdapterWeights,
        decoder: DecoderWeights,
        discriminators: DiscriminatorSet,
    ) -> Result<Self> {
        let mel = TensorMel::new(&MelFilterbank::new(model.mel)?, TRAIN_DTYPE)?;
        Ok(Self {
            gen_opt: AdamW::new(stage.optimizer),
            disc_opt: AdamW::new(stage.optimizer),
            stage,
            model,
            reference,
            adapted,
            adapter,
            decoder,
            discriminators,
            step: 0,
            mel,
        })
    }

    /// Generator-side parameter groups in update order, names prefixed by group.
    pub fn generator_groups(&self) -> Vec<(&'static str, Vec<(String, Var)>)> {
        let mut g = Vec::new();
        if let Some(enc) = &self.adapted {
            g.push((GROUP_ENCODER, prefixed(GROUP_ENCODER, enc.trainable_vars())));
        }
        g.push((GROUP_COMPRESSOR, prefixed(GROUP_COMPRESSOR, self.adapter.compressor_vars())));
        g.push((GROUP_RESTORER, prefixed(GROUP_RESTORER, self.adapter.restorer_vars())));
        g.push((GROUP_DECODER, prefixed(GROUP_DECODER, self.decoder.vars())));
        g
    }

    pub fn discriminator_vars(&self) -> Vec<(String, Var)> {
        prefixed(GROUP_DISCRIMINATORS, self.discriminators.vars())
    }

    pub fn batch_stream(&self) -> u64 {
        seed::derive(self.stage.seed, &format!("batches/stage{}", self.stage.stage))
    }

    pub fn latent_stream(&self) -> u64 {
        seed::derive(self.stage.seed, &format!("latents/stage{}", self.stage.stage))
    }

    /// The encoder whose features feed the adapter.
    pub fn source_encoder(&self) -> &EncoderWeights {
        self.adapted.as_ref().unwrap_or(&self.reference)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let gen = self.gen_opt.export();
        let disc = self.disc_opt.export();
        let meta = TrainMeta {
            kind: "train".into(),
            stage: self.stage.clone(),
            model: self.model.clone(),
            step: self.step,
            rng: RngMeta {
                seed: self.stage.seed,
                batch_stream: self.batch_stream(),
                latent_stream: self.latent_stream(),
            },
            opt_steps: BTreeMap::from([("gen".to_string(), gen.steps), ("disc".to_string(), disc.steps)]),
        };
        let mut c = Checkpoint::new(serde_json::to_value(meta)?);
        c.insert_group(REFERENCE, self.reference.store.tensors()?);
        if let Some(enc) = &self.adapted {
            c.insert_group(GROUP_ENCODER, enc.store.tensors()?);
        }
        c.insert_group(GROUP_COMPRESSOR, self.adapter.compressor_store.tensors()?);
        c.insert_group(GROUP_RESTORER, self.adapter.restorer_store.tensors()?);
        c.insert_group(GROUP_DECODER, self.decoder.store.tensors()?);
        c.insert_group(GROUP_DISCRIMINATORS, self.discriminators.store.tensors()?);
        c.insert_group("opt.gen", gen.tensors);
        c.insert_group("opt.disc", disc.tensors);
        Ok(c)
    }

    /// Exact restoration of a state saved by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| Error::data(format!("not a training checkpoint: {e}")))?;
        if meta.kind != "train" {
            return Err(Error::data(format!("checkpoint kind `{}` is not `train`", meta.kind)));
        }
        meta.model.validate()?;
        meta.stage.validate()?;
        let reference = load_encoder(&meta.model.encoder, c, REFERENCE)?;
        let adapted = if c.tensors.keys().any(|k| k.starts_with("encoder_adapted.")) {
            Some(load_encoder(&meta.model.encoder, c, GROUP_ENCODER)?)
        } else {
            None
        };
        let adapter = AdapterWeights::from_stores(
            meta.model.adapter.clone(),
            loaded_store(c, GROUP_COMPRESSOR)?,
            loaded_store(c, GROUP_RESTORER)?,
        )?;
        let decoder = DecoderWeights::from_store(meta.model.decoder.clone(), loaded_store(c, GROUP_DECODER)?)?;
        let discriminators =
            DiscriminatorSet::from_store(meta.model.discriminators.clone(), loaded_store(c, GROUP_DISCRIMINATORS)?)?;
        // Models must not have created parameters the checkpoint lacks.
        for (group, store) in [
            (GROUP_COMPRESSOR, &adapter.compressor_store),
            (GROUP_RESTORER, &adapter.restorer_store),
            (GROUP_DECODER, &decoder.store),
            (GROUP_DISCRIMINATORS, &discriminators.store),
        ] {
            if store.len() != c.group(group).len() {
                return Err(Error::data(format!("checkpoint group {group} does not match its config")));
            }
        }
        let mut state = Self::assemble(meta.stage, meta.model, reference, adapted, adapter, decoder, discriminators)?;
        state.step = meta.step;
        for (key, opt) in [("gen", &mut state.gen_opt), ("disc", &mut state.disc_opt)] {
            opt.import(&AdamWState {
                tensors: c.group(&format!("opt.{key}")),
                steps: meta.opt_steps.get(key).cloned().unwrap_or_default(),
            })?;
        }
        Ok(state)
    }

    pub fn features(&self, wave: &Waveform) -> Result<FeatureSequence> {
        self.source_encoder().encode(wave)
    }

    pub fn latent(&self, wave: &Waveform) -> Result<Latent> {
        self.adapter.compress_frames(&self.features(wave)?, LatentMode::Eval)
    }

    pub fn reconstruct(&self, wave: &Waveform) -> Result<Waveform> {
        reconstruct_with(self.source_encoder(), &self.adapter, &self.decoder, wave)
    }
}

fn loaded_store(c: &Checkpoint, group: &str) -> Result<ParamStore> {
    let store = ParamStore::new(0, TRAIN_DTYPE);
    for (name, t) in c.group(group) {
        store.insert(&name, &t)?;
    }
    Ok(store)
}

/// Encoder weights saved under `prefix` with the given config.
pub fn load_encoder(config: &EncoderConfig, c: &Checkpoint, prefix: &str) -> Result<EncoderWeights> {
    let tensors = c.group(prefix);
    if tensors.is_empty() {
        return Err(Error::data(format!("checkpoint has no `{prefix}` tensors")));
    }
    let enc = EncoderWeights::from_store(config.clone(), ParamStore::new(0, TRAIN_DTYPE))?;
    enc.store.load(&tensors, true)?;
    if enc.store.len() != tensors.len() {
        return Err(Error::data(format!("`{prefix}` tensors do not match the encoder config")));
    }
    Ok(enc)
}

/// Checkpoint holding a standalone (pretrained) encoder.
pub fn encoder_checkpoint(enc: &EncoderWeights, extra: serde_json::Value) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(serde_json::json!({
        "kind": "encoder",
        "encoder": enc.config,
        "info": extra,
    }));
    c.insert_group("encoder", enc.store.tensors()?);
    Ok(c)
}

pub fn encoder_from_checkpoint(c: &Checkpoint) -> Result<EncoderWeights> {
    let kind: String = c.meta("kind")?;
    if kind != "encoder" {
        return Err(Error::data(format!("checkpoint kind `{kind}` is not `encoder`")));
    }
    let config: EncoderConfig = c.meta("encoder")?;
    load_encoder(&config, c, "encoder")
}

fn reconstruct_with(
    enc: &EncoderWeights,
    adapter: &AdapterWeights,
    decoder: &DecoderWeights,
    wave: &Waveform,
) -> Result<Waveform> {
    let f = enc.encode(wave)?;
    let z = adapter.compress_frames(&f, LatentMode::Eval)?;
    decoder.decode(&z, Some(f.frames()))
}

/// Inference view of a trained checkpoint: encoder (the fine-tuned copy
/// when present), adapter and decoder.
pub struct Pipeline {
    pub model: ModelConfig,
    pub encoder: EncoderWeights,
    pub adapter: AdapterWeights,
    pub decoder: DecoderWeights,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("model", &self.model).finish()
    }
}

impl Pipeline {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(Self::from_state(TrainState::from_checkpoint(c)?))
    }

    pub fn from_state(s: TrainState) -> Self {
        let encoder = s.adapted.unwrap_or(s.reference);
        Self {
            model: s.model,
            encoder,
            adapter: s.adapter,
            decoder: s.decoder,
        }
    }

    pub fn features(&self, wave: &Waveform) -> Result<FeatureSequence> {
        self.encoder.encode(wave)
    }

    pub fn latent(&self, wave: &Waveform) -> Result<Latent> {
        self.adapter.compress_frames(&self.features(wave)?, LatentMode::Eval)
    }

    pub fn decode(&self, z: &Latent, frames: Option<usize>) -> Result<Waveform> {
        self.decoder.decode(z, frames)
    }

    pub fn reconstruct(&self, wave: &Waveform) -> Result<Waveform> {
        reconstruct_with(&self.encoder, &self.adapter, &self.decoder, wave)
    }

    /// Samples covered by the reconstruction of a `len`-sample input.
    pub fn output_len(len: usize) -> usize {
        len / SAMPLES_PER_FRAME * SAMPLES_PER_FRAME
    }
}
