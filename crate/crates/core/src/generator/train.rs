use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cfm::{cfm_loss, condition_drop, gaussian, infill_mask, sample, Cond, FlowBatch, SamplerConfig};
use super::corpus::{LatentCorpus, Normalizer};
use super::dit::{DiT, DiTConfig};
use crate::audio::Split;
use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::nn::{scalar, AdamW, AdamWConfig, ParamStore};
use crate::seed;
use crate::train::{lr_schedule, Checkpoint};

const CFM_DTYPE: DType = DType::F32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfmConfig {
    pub dit: DiTConfig,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch: usize,
    /// Training crop in frames of the target sequence.
    pub crop_frames: usize,
    /// Masked-span training conditioned on the visible prompt.
    pub infill: bool,
    pub mask_ratio: (f64, f64),
    pub seed: u64,
    /// Validation evaluations over the run (plus one at step 0).
    pub eval_points: u64,
    /// Noise draws per validation utterance.
    pub val_repeats: usize,
    pub optimizer: AdamWConfig,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            dit: DiTConfig::default(),
            total_steps: 20_000,
            warmup_steps: 1000,
            peak_lr: 1e-4,
            batch: 16,
            crop_frames: 50,
            infill: false,
            mask_ratio: (0.7, 1.0),
            seed: 0,
            eval_points: 10,
            val_repeats: 4,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("cfm warmup must be shorter than the run"));
        }
        if self.batch == 0 || self.crop_frames == 0 || self.eval_points == 0 || self.val_repeats == 0 {
            return Err(Error::config("cfm batch, crop, eval points and repeats must be positive"));
        }
        let (lo, hi) = self.mask_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("mask ratio range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }
}

/// A trained velocity network with the statistics of its targets.
#[derive(Debug)]
pub struct CfmModel {
    pub dit: DiT,
    pub normalizer: Normalizer,
    pub frame_rate: u32,
}

impl CfmModel {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "cfm",
            "dit": self.dit.config,
            "normalizer": self.normalizer,
            "frame_rate": self.frame_rate,
            "info": extra,
        }));
        c.insert_group("dit", self.dit.store.tensors()?);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let kind: String = c.meta("kind")?;
        if kind != "cfm" {
            return Err(Error::data(format!("checkpoint kind `{kind}` is not `cfm`")));
        }
        let dit = DiT::from_store(c.meta("dit")?, ParamStore::new(0, CFM_DTYPE))?;
        let tensors = c.group("dit");
        dit.store.load(&tensors, true)?;
        if dit.store.len() != tensors.len() {
            return Err(Error::data("cfm tensors do not match the DiT config"));
        }
        Ok(Self {
            dit,
            normalizer: c.meta("normalizer")?,
            frame_rate: c.meta("frame_rate")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }

    /// Generates one sequence for the per-frame `classes`. With a prompt,
    /// frames where `mask` is 0 are copied from it and the rest generated.
    pub fn generate(&self, classes: &[usize], prompt: Option<(&FrameMatrix, &[f32])>, sampler: &SamplerConfig) -> Result<FrameMatrix> {
        let t = classes.len();
        let d = self.dit.config.target_dim;
        if t == 0 {
            return Err(Error::data("cannot generate an empty sequence"));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.dit.config.n_classes) {
            return Err(Error::data(format!("class {c} outside the model's {} classes", self.dit.config.n_classes)));
        }
        let dev = crate::nn::device();
        let cls = Tensor::from_vec(classes.iter().map(|&c| c as u32).collect::<Vec<_>>(), (1, t), &dev)?;
        let (prompt_t, keep) = match prompt {
            Some((p, mask)) => {
                if p.frames() != t || mask.len() != t || p.dim() != d {
                    return Err(Error::data("prompt and mask must match the generated length and width"));
                }
                let pn = self.normalizer.normalize(&p.to_tensor(CFM_DTYPE)?)?;
                let m = Tensor::from_vec(mask.to_vec(), (1, t, 1), &dev)?;
                let keep = (m.ones_like()? - &m)?;
                (pn.broadcast_mul(&keep)?, Some((keep, m)))
            }
            None => (Tensor::zeros((1, t, d), CFM_DTYPE, &dev)?, None),
        };
        let cond = Cond {
            classes: cls,
            prompt: prompt_t.clone(),
        };
        let mut x = sample(&self.dit, &cond, &[1, t, d], sampler, CFM_DTYPE)?;
        if let Some((_, m)) = keep {
            x = (x.broadcast_mul(&m)? + prompt_t)?;
        }
        FrameMatrix::from_tensor(&self.normalizer.denormalize(&x)?.squeeze(0)?, self.frame_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub val_loss: f64,
    /// Loss of a model that always predicts zero velocity.
    pub baseline: f64,
    pub normalized: f64,
}

#[derive(Debug)]
pub struct CfmOutcome {
    pub model: CfmModel,
    pub curve: Vec<CurvePoint>,
    pub train_losses: Vec<f64>,
}

/// Shared crop length: the configured crop, shortened to the shortest item.
fn crop_len(cfg: &CfmConfig, corpus: &LatentCorpus) -> Result<usize> {
    let shortest = corpus
        .items
        .iter()
        .map(|it| it.frames.frames())
        .min()
        .ok_or_else(|| Error::data("empty latent corpus"))?;
    Ok(cfg.crop_frames.min(shortest))
}

struct Assembled {
    x1: Vec<f32>,
    classes: Vec<u32>,
}

fn crop_item(out: &mut Assembled, frames: &FrameMatrix, classes: &[usize], start: usize, len: usize) {
    for f in start..start + len {
        out.x1.extend_from_slice(frames.row(f));
        out.classes.push(classes[f] as u32);
    }
}

/// Turns clean crops into a flow batch: normalization, optional condition
/// drop, optional infilling masks, noise and times.
#[allow(clippy::too_many_arguments)]
fn flow_batch(
    a: Assembled,
    b: usize,
    t: usize,
    d: usize,
    norm: &Normalizer,
    cfg: &CfmConfig,
    drop: &[bool],
    times: Vec<f64>,
    rng: &mut impl Rng,
    noise_seed: u64,
) -> Result<FlowBatch> {
    let dev = crate::nn::device();
    let null = cfg.dit.n_classes as u32;
    let x1 = norm.normalize(&Tensor::from_vec(a.x1, (b, t, d), &dev)?.to_dtype(CFM_DTYPE)?)?;
    let mut classes = a.classes;
    for (i, &dropped) in drop.iter().enumerate() {
        if dropped {
            classes[i * t..(i + 1) * t].fill(null);
        }
    }
    let (prompt, mask) = if cfg.infill {
        let mut m = Vec::with_capacity(b * t);
        for &dropped in drop {
            // A dropped condition also hides the prompt.
            let row = infill_mask(rng, t, cfg.mask_ratio);
            if dropped {
                m.extend(std::iter::repeat_n(1.0f32, t));
            } else {
                m.extend(row);
            }
        }
        let m = Tensor::from_vec(m, (b, t), &dev)?.to_dtype(CFM_DTYPE)?;
        let keep = (m.ones_like()? - &m)?;
        (x1.broadcast_mul(&keep.unsqueeze(2)?)?, Some(m))
    } else {
        (x1.zeros_like()?, None)
    };
    Ok(FlowBatch {
        x0: gaussian(&[b, t, d], noise_seed, CFM_DTYPE)?,
        x1,
        t: times,
        cond: Cond {
            classes: Tensor::from_vec(classes, (b, t), &dev)?,
            prompt,
        },
        mask,
    })
}

/// Fixed validation batch: leading crop of each held-out item, repeated with
/// independent noise and stratified times.
fn validation_batch(cfg: &CfmConfig, val: &LatentCorpus, norm: &Normalizer, t: usize, d: usize) -> Result<FlowBatch> {
    let stream = seed::derive(cfg.seed, "cfm.validation");
    let mut rng = seed::rng(stream);
    let mut a = Assembled {
        x1: Vec::new(),
        classes: Vec::new(),
    };
    for _ in 0..cfg.val_repeats {
        for it in &val.items {
            crop_item(&mut a, &it.frames, &it.classes, 0, t);
        }
    }
    let b = cfg.val_repeats * val.len();
    let times = (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect();
    flow_batch(a, b, t, d, norm, cfg, &vec![false; b], times, &mut rng, seed::derive(stream, "noise"))
}

fn zero_baseline(batch: &FlowBatch) -> Result<f64> {
    struct Zero;
    impl super::cfm::VelocityField for Zero {
        fn velocity(&self, x: &Tensor, _t: &[f64], _c: &Cond) -> Result<Tensor> {
            Ok(x.zeros_like()?)
        }
        fn null_class(&self) -> u32 {
            0
        }
    }
    scalar(&cfm_loss(&Zero, batch)?)
}

/// Trains a DiT on `corpus` (held-out items by the corpus split rule).
/// Target width and class count are taken from the corpus.
pub fn train_cfm(cfg: &CfmConfig, corpus: &LatentCorpus) -> Result<CfmOutcome> {
    let train = corpus.subset(Split::Train);
    let val = corpus.subset(Split::Test);
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("latent corpus too small for a train/validation split"));
    }
    let d = corpus.dim()?;
    let mut cfg = cfg.clone();
    cfg.dit.target_dim = d;
    cfg.dit.n_classes = cfg.dit.n_classes.max(corpus.n_classes());
    cfg.validate()?;

    let normalizer = Normalizer::fit(&train)?;
    let t = crop_len(&cfg, corpus)?;
    let dit = DiT::new(cfg.dit.clone(), seed::derive(cfg.seed, "cfm.init"), CFM_DTYPE)?;
    let vars = dit.vars();
    let mut opt = AdamW::new(cfg.optimizer);
    let val_batch = validation_batch(&cfg, &val, &normalizer, t, d)?;
    let baseline = zero_baseline(&val_batch)?;
    let stream = seed::derive(cfg.seed, "cfm.batches");

    let eval_every = (cfg.total_steps / cfg.eval_points).max(1);
    let evaluate = |dit: &DiT, step: u64| -> Result<CurvePoint> {
        let val_loss = scalar(&cfm_loss(dit, &val_batch)?)?;
        Ok(CurvePoint {
            step,
            val_loss,
            baseline,
            normalized: val_loss / baseline,
        })
    };
    let mut curve = vec![evaluate(&dit, 0)?];
    let mut train_losses = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let step_seed = seed::derive_step(stream, step);
        let mut rng = seed::rng(step_seed);
        let mut a = Assembled {
            x1: Vec::with_capacity(cfg.batch * t * d),
            classes: Vec::with_capacity(cfg.batch * t),
        };
        for _ in 0..cfg.batch {
            let it = &train.items[rng.random_range(0..train.len())];
            let start = rng.random_range(0..=it.frames.frames() - t);
            crop_item(&mut a, &it.frames, &it.classes, start, t);
        }
        let drop = condition_drop(&mut rng, cfg.batch, cfg.dit.cond_drop);
        let times = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let batch = flow_batch(a, cfg.batch, t, d, &normalizer, &cfg, &drop, times, &mut rng, seed::derive(step_seed, "noise"))?;
        let loss = cfm_loss(&dit, &batch)?;
        train_losses.push(scalar(&loss)?);
        let mut grads = loss.backward()?;
        let lr = lr_schedule(step, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr)?;
        opt.step(&vars, &mut grads, lr)?;
        let done = step + 1;
        if done % eval_every == 0 || done == cfg.total_steps {
            if curve.last().map(|p| p.step) != Some(done) {
                let p = evaluate(&dit, done)?;
                log::info!("cfm step {done}: val {:.5} (normalized {:.4})", p.val_loss, p.normalized);
                curve.push(p);
            }
        }
    }
    let frame_rate = corpus.frame_rate()?;
    Ok(CfmOutcome {
        model: CfmModel {
            dit,
            normalizer,
            frame_rate,
        },
        curve,
        train_losses,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::FrameMatrix;
    use crate::generator::corpus::LatentItem;
    use rand_distr::{Distribution, StandardNormal};

    /// Class-dependent piecewise-constant sequences with small noise.
    pub(crate) fn toy_corpus(n: usize, frames: usize, dim: usize, seed: u64) -> LatentCorpus {
        let mut rng = seed::rng(seed);
        let items = (0..n)
            .map(|i| {
                let classes: Vec<usize> = (0..frames).map(|f| (f / 8 + i) % 3).collect();
                let mut data = Vec::with_capacity(frames * dim);
                for &c in &classes {
                    for k in 0..dim {
                        let centre = ((c * dim + k) as f64 * 1.3).sin() * 2.0 + 1.0;
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push((centre + 0.1 * noise) as f32);
                    }
                }
                LatentItem {
                    id: format!("t{i:03}"),
                    speaker: i % 2,
                    frames: FrameMatrix::new(data, frames, dim, 50).unwrap(),
                    classes,
                }
            })
            .collect();
        LatentCorpus { items }
    }

    pub(crate) fn tiny_config(steps: u64) -> CfmConfig {
        CfmConfig {
            dit: DiTConfig {
                width: 32,
                depth: 1,
                heads: 2,
                ..Default::default()
            },
            total_steps: steps,
            warmup_steps: steps / 10,
            peak_lr: 3e-3,
            batch: 8,
            crop_frames: 16,
            val_repeats: 2,
            ..Default::default()
        }
    }

    #[test]
    fn training_beats_zero_baseline_and_is_deterministic() {
        let corpus = toy_corpus(30, 32, 4, 1);
        let cfg = tiny_config(60);
        let a = train_cfm(&cfg, &corpus).unwrap();
        let b = train_cfm(&cfg, &corpus).unwrap();
        assert_eq!(a.train_losses, b.train_losses);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 11);
        // Zero-initialized output layers start exactly at the baseline.
        assert_eq!(a.curve[0].normalized, 1.0);
        assert!(a.curve.last().unwrap().normalized < 0.9, "{:?}", a.curve.last());
    }

    #[test]
    fn infill_training_runs_and_checkpoint_round_trips() {
        let corpus = toy_corpus(20, 24, 3, 2);
        let mut cfg = tiny_config(10);
        cfg.infill = true;
        let out = train_cfm(&cfg, &corpus).unwrap();
        let c = out.model.to_checkpoint(serde_json::Value::Null).unwrap();
        let back = CfmModel::from_checkpoint(&CfmModel::to_checkpoint(&out.model, serde_json::Value::Null).unwrap()).unwrap();
        assert_eq!(back.normalizer, out.model.normalizer);
        assert_eq!(back.dit.store.digest().unwrap(), out.model.dit.store.digest().unwrap());
        assert_eq!(c.to_bytes().unwrap(), back.to_checkpoint(serde_json::Value::Null).unwrap().to_bytes().unwrap());

        let it = &corpus.items[0];
        let mask: Vec<f32> = (0..24).map(|i| if i < 8 { 0.0 } else { 1.0 }).collect();
        let s = SamplerConfig { steps: 4, guidance: 2.0, seed: 3 };
        let g = out.model.generate(&it.classes, Some((&it.frames, &mask)), &s).unwrap();
        for f in 0..8 {
            for (a, b) in g.row(f).iter().zip(it.frames.row(f)) {
                assert!((a - b).abs() < 1e-4, "prompt frame {f} not preserved");
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_converges_with_steps() {
        let corpus = toy_corpus(30, 32, 4, 3);
        let out = train_cfm(&tiny_config(150), &corpus).unwrap();
        let classes = &corpus.items[1].classes[..16];
        let run = |steps, seed| {
            let s = SamplerConfig { steps, guidance: 1.5, seed };
            out.model.generate(classes, None, &s).unwrap()
        };
        assert_eq!(run(8, 5), run(8, 5));
        let diff = |a: &FrameMatrix, b: &FrameMatrix| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)
        };
        let (s32, s64, s128) = (run(32, 7), run(64, 7), run(128, 7));
        assert!(diff(&s64, &s128) < diff(&s32, &s64), "{} vs {}", diff(&s64, &s128), diff(&s32, &s64));
    }

    #[test]
    fn unit_guidance_skips_the_unconditional_pass() {
        let corpus = toy_corpus(20, 24, 3, 4);
        let mut cfg = tiny_config(10);
        cfg.dit.cond_drop = 0.0;
        let out = train_cfm(&cfg, &corpus).unwrap();
        let dev = crate::nn::device();
        let cond = Cond {
            classes: Tensor::zeros((1, 8), DType::U32, &dev).unwrap(),
            prompt: Tensor::zeros((1, 8, 3), CFM_DTYPE, &dev).unwrap(),
        };
        let guided = sample(&out.model.dit, &cond, &[1, 8, 3], &SamplerConfig { steps: 5, guidance: 1.0, seed: 2 }, CFM_DTYPE).unwrap();
        // Plain conditional Euler path.
        let mut x = gaussian(&[1, 8, 3], 2, CFM_DTYPE).unwrap();
        for i in 0..5 {
            let v = crate::generator::VelocityField::velocity(&out.model.dit, &x, &[i as f64 / 5.0], &cond).unwrap();
            x = (x + (v * 0.2).unwrap()).unwrap();
        }
        let a = guided.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
