use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::acoustic::{DecoderConfig, DiscriminatorConfig};
use crate::adapter::{AdapterConfig, Bottleneck};
use crate::audio::{CorpusSpec, MelConfig};
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::features::{EncoderConfig, PretrainConfig};
use crate::generator::{CfmConfig, DiTConfig, SamplerConfig};
use crate::seed;
use crate::train::{ModelConfig, StageConfig};

/// Evaluation and probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub probe_seed: u64,
    /// Seeds of the matched generator runs in the diffusability probe.
    pub diffusability_seeds: Vec<u64>,
    /// Generated utterances scored per trained generator.
    pub samples_per_arm: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_seed: 0,
            diffusability_seeds: vec![1, 2, 3],
            samples_per_arm: 10,
        }
    }
}

/// Shortened stage lengths for the bottleneck ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Subset of `R1`..`R6` to run.
    pub rows: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 1000,
            rows: ["R1", "R2", "R3", "R4", "R5", "R6"].map(String::from).to_vec(),
        }
    }
}

/// Everything one experiment needs. Module seeds are derived from `seed`
/// during resolution, so only the global seed is an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub mel: MelConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub discriminators: DiscriminatorConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub cfm: CfmConfig,
    pub sampler: SamplerConfig,
    pub classifiers: ClassifierConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

pub const PRESETS: &[&str] = &["desk", "tiny", "paper"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Full-size architecture and schedules. Documentation only: far beyond
    /// a CPU budget.
    pub fn paper() -> Self {
        let adapter = AdapterConfig {
            d_s: 1024,
            d_z: 128,
            heads: 16,
            mlp_hidden: 576,
            ..AdapterConfig::default()
        };
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            mel: MelConfig::default(),
            encoder: EncoderConfig {
                d_s: 1024,
                n_layers: 24,
                heads: 16,
                ..EncoderConfig::default()
            },
            pretrain: PretrainConfig::default(),
            decoder: DecoderConfig::paper_scale(128),
            adapter,
            discriminators: DiscriminatorConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            cfm: CfmConfig {
                dit: DiTConfig::paper_scale(128, 8),
                peak_lr: 7.5e-5,
                warmup_steps: 20_000,
                total_steps: 400_000,
                ..CfmConfig::default()
            },
            sampler: SamplerConfig::default(),
            classifiers: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
        .resolved()
    }

    /// CPU-sized defaults: a 256-wide encoder, a 32-dim latent and a
    /// four-plus-three layer decoder.
    pub fn desk() -> Self {
        let mut stage1 = StageConfig::stage1();
        stage1.total_steps = 10_000;
        stage1.warmup_steps = 1000;
        stage1.peak_lr = 3e-4;
        let mut stage2 = StageConfig::stage2();
        stage2.total_steps = 5000;
        stage2.warmup_steps = 500;
        stage2.peak_lr = 1e-4;
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            mel: MelConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig {
                d_z: 32,
                mlp_hidden: 144,
                ..AdapterConfig::default()
            },
            decoder: DecoderConfig::default(),
            discriminators: DiscriminatorConfig {
                period_channels: vec![8, 16, 32],
                resolution_channels: vec![16, 16, 16],
                ..DiscriminatorConfig::default()
            },
            stage1,
            stage2,
            cfm: CfmConfig {
                total_steps: 5000,
                warmup_steps: 500,
                peak_lr: 3e-4,
                ..CfmConfig::default()
            },
            sampler: SamplerConfig::default(),
            classifiers: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
        .resolved()
    }

    /// Minutes-scale settings used by the acceptance suite and smoke tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.encoder = EncoderConfig {
            d_s: 64,
            n_layers: 4,
            heads: 2,
            conv_channels: 64,
            ..EncoderConfig::default()
        };
        c.pretrain.steps = 400;
        c.pretrain.warmup_steps = 40;
        c.pretrain.peak_lr = 5e-4;
        c.pretrain.crop_frames = 25;
        c.adapter = AdapterConfig {
            d_z: 16,
            mlp_hidden: 144,
            n_layers: 2,
            heads: 2,
            ..AdapterConfig::default()
        };
        c.decoder = DecoderConfig {
            hidden: 64,
            n_dec: 2,
            voc_hidden: 64,
            n_voc: 2,
            heads: 2,
            ..DecoderConfig::default()
        };
        for (s, total, warm, lr) in [(&mut c.stage1, 1500, 100, 2e-3), (&mut c.stage2, 300, 30, 1e-4)] {
            s.total_steps = total;
            s.warmup_steps = warm;
            s.peak_lr = lr;
            s.crop_frames = 25;
            s.checkpoint_every = 100;
        }
        // Discriminators warm up late in stage 1 so stage 2 does not start
        // against untrained ones.
        c.stage1.adversarial_start = 1000;
        c.cfm = CfmConfig {
            dit: DiTConfig {
                width: 64,
                depth: 2,
                heads: 2,
                ..DiTConfig::default()
            },
            total_steps: 300,
            warmup_steps: 30,
            peak_lr: 2e-3,
            batch: 16,
            crop_frames: 25,
            ..CfmConfig::default()
        };
        c.sampler.steps = 16;
        c.classifiers.content_steps = 600;
        c.classifiers.speaker_steps = 300;
        c.ablation.stage1_steps = 20;
        c.ablation.stage2_steps = 10;
        c.eval.samples_per_arm = 6;
        c.resolved()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected one of {PRESETS:?})"))),
        }
    }

    /// Copies shared widths and rates between sections and derives every
    /// module seed from the global one. Idempotent.
    pub fn resolved(mut self) -> Self {
        let model = self.model();
        self.adapter = model.adapter;
        self.decoder = model.decoder;
        let g = self.seed;
        self.corpus.seed = seed::derive(g, "corpus");
        self.pretrain.seed = seed::derive(g, "pretrain");
        self.stage1.seed = seed::derive(g, "stage1");
        self.stage2.seed = seed::derive(g, "stage2");
        self.stage1.stage = 1;
        self.stage2.stage = 2;
        self.cfm.seed = seed::derive(g, "cfm");
        self.sampler.seed = seed::derive(g, "sampler");
        self.classifiers.seed = seed::derive(g, "classifiers");
        self.eval.probe_seed = seed::derive(g, "probe");
        self
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            decoder: self.decoder.clone(),
            discriminators: self.discriminators.clone(),
            mel: self.mel,
        }
        .resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.cfm.validate()?;
        if self.eval.diffusability_seeds.is_empty() {
            return Err(Error::config("eval.diffusability_seeds must not be empty"));
        }
        if self.adapter.n_layers > self.encoder.n_layers && self.adapter.init_from_encoder {
            return Err(Error::config("compressor has more layers than the encoder it initializes from"));
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_value(&serde_json::to_value(self)?))
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(canonical_json(&serde_json::to_value(self)?))
    }
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

pub fn hash_value(v: &Value) -> String {
    let digest = Sha256::digest(canonical_json(v).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Overlays `top` onto `base`. Keys absent from `base` are rejected.
fn merge(base: &mut Value, top: &Value, path: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::config(format!("unknown config key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, t) => {
            *b = t.clone();
            Ok(())
        }
    }
}

/// Parses a flag value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c = value`; every path segment must already exist.
pub fn apply_override(v: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = v;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg),
            Value::Array(a) => seg.parse::<usize>().ok().and_then(move |i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("unknown config key `{path}`")))?;
    }
    *cur = parse_value(raw);
    Ok(())
}

/// Preset, then config file, then `section.key=value` overrides; the result
/// is resolved and validated.
pub fn load_config(preset: &str, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::preset(preset)?)?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let top: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
        merge(&mut v, &top, "")?;
    }
    for (k, raw) in overrides {
        apply_override(&mut v, k, raw)?;
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::config(format!("invalid config: {e}")))?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// The six bottleneck ablation rows applied to a base configuration.
pub fn ablation_row(base: &RunConfig, row: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    c.adapter.bottleneck = Bottleneck::Ae;
    c.adapter.frame_rate = 50;
    c.encoder.tap_layer = 0;
    match row {
        "R1" => {}
        "R2" => c.adapter.bottleneck = Bottleneck::Vae,
        "R3" => c.adapter.bottleneck = Bottleneck::SigmaVae,
        "R4" => c.adapter.frame_rate = 25,
        "R5" => c.adapter.d_z = (base.adapter.d_z / 2).max(1),
        "R6" => c.encoder.tap_layer = base.encoder.n_layers - 1,
        other => return Err(Error::config(format!("unknown ablation row `{other}`"))),
    }
    c.stage1.total_steps = base.ablation.stage1_steps;
    c.stage1.warmup_steps = (base.ablation.stage1_steps / 10).max(1).min(base.ablation.stage1_steps - 1);
    c.stage2.total_steps = base.ablation.stage2_steps;
    c.stage2.warmup_steps = (base.ablation.stage2_steps / 10).max(1).min(base.ablation.stage2_steps - 1);
    for s in [&mut c.stage1, &mut c.stage2] {
        s.checkpoint_every = s.total_steps;
    }
    let c = c.resolved();
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_resolve_idempotently() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(c.clone().resolved(), c);
        }
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = load_config("desk", None, &[("stage1.peak_lr".into(), "2e-4".into())]).unwrap();
        assert_eq!(c.stage1.peak_lr, 2e-4);
        let e = load_config("desk", None, &[("stage1.peak_lrr".into(), "2e-4".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = load_config("desk", None, &[("stage1.peak_lr".into(), "fast".into())]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(matches!(load_config("huge", None, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn config_file_overlays_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"stage2": {"lambda_sem": 0.5}, "seed": 9}"#).unwrap();
        let c = load_config("tiny", Some(&p), &[]).unwrap();
        assert_eq!(c.stage2.lambda_sem, 0.5);
        assert_eq!(c.stage1.seed, seed::derive(9, "stage1"));
        std::fs::write(&p, r#"{"stage2": {"lambda": 0.5}}"#).unwrap();
        assert!(matches!(load_config("tiny", Some(&p), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_key_order_and_round_trips() {
        let c = RunConfig::tiny();
        let v = serde_json::to_value(&c).unwrap();
        let mut reordered = serde_json::Map::new();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.reverse();
        for k in keys {
            reordered.insert(k.clone(), obj[&k].clone());
        }
        assert_eq!(hash_value(&Value::Object(reordered)), c.hash().unwrap());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(load_config("desk", Some(&p), &[]).unwrap().hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn ablation_rows_differ_on_one_axis() {
        let base = RunConfig::tiny();
        let r1 = ablation_row(&base, "R1").unwrap();
        assert_eq!(ablation_row(&base, "R2").unwrap().adapter.bottleneck, Bottleneck::Vae);
        assert_eq!(ablation_row(&base, "R3").unwrap().adapter.bottleneck, Bottleneck::SigmaVae);
        let r4 = ablation_row(&base, "R4").unwrap();
        assert_eq!((r4.adapter.frame_rate, r4.decoder.frame_rate), (25, 25));
        let r5 = ablation_row(&base, "R5").unwrap();
        assert_eq!((r5.adapter.d_z, r5.decoder.d_z), (r1.adapter.d_z / 2, r1.adapter.d_z / 2));
        assert_eq!(ablation_row(&base, "R6").unwrap().encoder.tap_layer, base.encoder.n_layers - 1);
        assert!(ablation_row(&base, "R7").is_err());
    }
}
