use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::schedule::lr_schedule;
use super::state::{TrainState, GROUP_DISCRIMINATORS, REFERENCE};
use crate::acoustic::{disc_loss, feature_matching_loss, gen_adv_loss, mel_loss};
use crate::adapter::{kl_loss, semantic_loss, Bottleneck, LatentMode};
use crate::data::CropBatch;
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::seed;

/// One metric-log record. Terms that were not evaluated at this step are
/// `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    /// Index of the step this record describes (0-based).
    pub step: u64,
    pub lr: f64,
    pub adversarial: bool,
    pub total: f64,
    pub acoustic: f64,
    pub mel: f64,
    pub adv: Option<f64>,
    pub fm: Option<f64>,
    pub disc: Option<f64>,
    /// Stage 1: semantic reconstruction of the frozen features.
    pub sem: Option<f64>,
    /// Stage 2: adapted features against the reference.
    pub sem_feat: Option<f64>,
    /// Stage 2: restored features against the reference.
    pub sem_rec: Option<f64>,
    pub kl: Option<f64>,
    /// Gradient norm per parameter group, before clipping.
    pub grad_norms: BTreeMap<String, f64>,
}

impl StepMetrics {
    /// Total recomputed from the logged components and the stage weights.
    pub fn recombine(&self, lambda_sem: f64, w: &crate::acoustic::AcousticWeights, kl_weight: f64) -> f64 {
        let acoustic = w.mel * self.mel + w.adv * self.adv.unwrap_or(0.0) + w.fm * self.fm.unwrap_or(0.0);
        let sem = self.sem.unwrap_or(0.0) + self.sem_feat.unwrap_or(0.0) + self.sem_rec.unwrap_or(0.0);
        acoustic + lambda_sem * (sem + kl_weight * self.kl.unwrap_or(0.0))
    }
}

/// Loss tensors of one generator forward pass.
pub(crate) struct GenForward {
    pub y_hat: Tensor,
    pub mel: Tensor,
    /// Semantic terms (already summed) and the KL term, before weighting.
    pub sem_terms: Vec<(&'static str, Tensor)>,
    pub kl: Option<Tensor>,
}

impl TrainState {
    fn latent_mode(&self, step: u64) -> LatentMode {
        match self.model.adapter.bottleneck {
            Bottleneck::Ae => LatentMode::Eval,
            _ => LatentMode::Train(seed::derive_step(self.latent_stream(), step)),
        }
    }

    /// Forward pass implementing the gradient topology of the current stage.
    pub(crate) fn generator_forward(&self, batch: &CropBatch, step: u64) -> Result<GenForward> {
        let audio = &batch.audio;
        let f_ref = self.reference.forward(audio)?.detach();
        let frames = f_ref.dim(1)?;
        let mode = self.latent_mode(step);
        match (self.stage.stage, &self.adapted) {
            (1, _) => {
                let c = self.adapter.compress(&f_ref, mode)?;
                let f_hat = self.adapter.restore(&c.z, frames)?;
                let sem = semantic_loss(&f_ref, &f_hat)?;
                let kl = c.logvar.as_ref().map(|lv| kl_loss(&c.mu, lv)).transpose()?;
                // The decoder sees the latent with its gradient path cut.
                let y_hat = self.decoder.forward(&c.z.detach(), frames)?;
                let mel = mel_loss(&self.mel, audio, &y_hat)?;
                Ok(GenForward {
                    y_hat,
                    mel,
                    sem_terms: vec![("sem", sem)],
                    kl,
                })
            }
            (2, adapted) => {
                let f_src = match adapted {
                    Some(enc) => enc.forward(audio)?,
                    None => f_ref.clone(),
                };
                let c = self.adapter.compress(&f_src, mode)?;
                let f_hat = self.adapter.restore(&c.z, frames)?;
                let mut sem_terms = Vec::with_capacity(2);
                if adapted.is_some() {
                    sem_terms.push(("sem_feat", semantic_loss(&f_src, &f_ref)?));
                }
                sem_terms.push(("sem_rec", semantic_loss(&f_hat, &f_ref)?));
                let kl = c.logvar.as_ref().map(|lv| kl_loss(&c.mu, lv)).transpose()?;
                let y_hat = self.decoder.forward(&c.z, frames)?;
                let mel = mel_loss(&self.mel, audio, &y_hat)?;
                Ok(GenForward {
                    y_hat,
                    mel,
                    sem_terms,
                    kl,
                })
            }
            (s, _) => Err(Error::config(format!("unknown stage {s}"))),
        }
    }

    /// Semantic objective `sum(terms) + kl_weight * kl`, unweighted by lambda.
    fn semantic_objective(&self, g: &GenForward) -> Result<Option<Tensor>> {
        let mut acc: Option<Tensor> = None;
        for (_, t) in &g.sem_terms {
            acc = Some(match acc {
                Some(a) => (a + t)?,
                None => t.clone(),
            });
        }
        if let (Some(kl), Some(a)) = (&g.kl, &acc) {
            acc = Some((a + (kl * self.model.adapter.kl_weight)?)?);
        }
        Ok(acc)
    }

    /// One optimization step on `batch`: a discriminator update when the
    /// adversarial terms are active, then one generator-side update.
    pub fn train_step(&mut self, batch: &CropBatch) -> Result<StepMetrics> {
        let step = self.step;
        let cfg = self.stage.clone();
        let lr = lr_schedule(step, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr)?;
        let adversarial = cfg.adversarial_at(step);
        let g = self.generator_forward(batch, step)?;
        let mut grad_norms = BTreeMap::new();

        let mut disc_value = None;
        let mut acoustic = (&g.mel * cfg.weights.mel)?;
        let (mut adv_value, mut fm_value) = (None, None);
        if adversarial {
            let real = self.discriminators.forward(&batch.audio)?;
            let fake = self.discriminators.forward(&g.y_hat.detach())?;
            let l_d = disc_loss(&real.logits, &fake.logits)?;
            let v = scalar(&l_d)?;
            check_finite(step, &[("disc", v)])?;
            let mut grads = l_d.backward()?;
            let vars = self.discriminator_vars();
            let n = self.disc_opt.step(&vars, &mut grads, lr)?;
            grad_norms.insert(GROUP_DISCRIMINATORS.to_string(), n);
            disc_value = Some(v);

            let real = self.discriminators.forward(&batch.audio)?.detach();
            let fake = self.discriminators.forward(&g.y_hat)?;
            let adv = gen_adv_loss(&fake.logits)?;
            let fm = feature_matching_loss(&real.taps, &fake.taps)?;
            adv_value = Some(scalar(&adv)?);
            fm_value = Some(scalar(&fm)?);
            acoustic = ((acoustic + (adv * cfg.weights.adv)?)? + (fm * cfg.weights.fm)?)?;
        }
        let semantic = self.semantic_objective(&g)?;
        let total = match (&semantic, cfg.lambda_sem > 0.0) {
            (Some(s), true) => (&acoustic + (s * cfg.lambda_sem)?)?,
            // A zero weight removes the term from the graph altogether.
            _ => acoustic.clone(),
        };

        let mut m = StepMetrics {
            stage: cfg.stage,
            step,
            lr,
            adversarial,
            total: scalar(&total)?,
            acoustic: scalar(&acoustic)?,
            mel: scalar(&g.mel)?,
            adv: adv_value,
            fm: fm_value,
            disc: disc_value,
            sem: None,
            sem_feat: None,
            sem_rec: None,
            kl: g.kl.as_ref().map(scalar).transpose()?,
            grad_norms: BTreeMap::new(),
        };
        for (name, t) in &g.sem_terms {
            let v = Some(scalar(t)?);
            match *name {
                "sem" => m.sem = v,
                "sem_feat" => m.sem_feat = v,
                _ => m.sem_rec = v,
            }
        }
        check_finite(
            step,
            &[
                ("total", m.total),
                ("mel", m.mel),
                ("adv", m.adv.unwrap_or(0.0)),
                ("fm", m.fm.unwrap_or(0.0)),
                ("sem", m.sem.or(m.sem_rec).unwrap_or(0.0)),
                ("kl", m.kl.unwrap_or(0.0)),
            ],
        )?;

        let mut grads = total.backward()?;
        for (group, vars) in self.generator_groups() {
            let n = self.gen_opt.step(&vars, &mut grads, lr)?;
            grad_norms.insert(group.to_string(), n);
        }
        m.grad_norms = grad_norms;
        self.step += 1;
        Ok(m)
    }

    /// Direct gradient inspection for the stage-1 topology: the largest
    /// absolute gradient per group, from the acoustic objective alone and
    /// from the semantic objective alone. Parameters the objective does not
    /// reach report exactly zero. Nothing is updated.
    pub fn gradient_report(&self, batch: &CropBatch) -> Result<GradientReport> {
        let g = self.generator_forward(batch, self.step)?;
        let mut acoustic = (&g.mel * self.stage.weights.mel)?;
        if self.stage.adversarial_at(self.step) {
            let real = self.discriminators.forward(&batch.audio)?.detach();
            let fake = self.discriminators.forward(&g.y_hat)?;
            acoustic = ((acoustic + (gen_adv_loss(&fake.logits)? * self.stage.weights.adv)?)?
                + (feature_matching_loss(&real.taps, &fake.taps)? * self.stage.weights.fm)?)?;
        }
        let mut groups = self.generator_groups();
        groups.push((REFERENCE, self.reference.store.vars()));
        let report = |grads: &GradStore| -> Result<BTreeMap<String, f64>> {
            groups
                .iter()
                .map(|(name, vars)| Ok((name.to_string(), max_abs_grad(vars, grads)?)))
                .collect()
        };
        let acoustic = report(&acoustic.backward()?)?;
        let semantic = match self.semantic_objective(&g)? {
            Some(s) => report(&s.backward()?)?,
            None => BTreeMap::new(),
        };
        Ok(GradientReport { acoustic, semantic })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub acoustic: BTreeMap<String, f64>,
    pub semantic: BTreeMap<String, f64>,
}

fn max_abs_grad(vars: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut m: f64 = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            m = m.max(scalar(&g.abs()?.max_all()?)?);
        }
    }
    Ok(m)
}

fn check_finite(step: u64, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let dump: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::numeric(format!("non-finite loss at step {step}: {}", dump.join(", "))))
}

/// Stage-1 step; fails if the state belongs to another stage.
pub fn stage1_step(state: &mut TrainState, batch: &CropBatch) -> Result<StepMetrics> {
    if state.stage.stage != 1 {
        return Err(Error::config("stage1_step on a stage-2 state"));
    }
    state.train_step(batch)
}

/// Stage-2 step; the frozen reference lives inside the state.
pub fn stage2_step(state: &mut TrainState, batch: &CropBatch) -> Result<StepMetrics> {
    if state.stage.stage != 2 {
        return Err(Error::config("stage2_step on a stage-1 state"));
    }
    state.train_step(batch)
}

/// Stage-2 total from its components: `acoustic + lambda * (feat + rec)`.
pub fn stage2_total(acoustic: f64, sem_feat: f64, sem_rec: f64, lambda_sem: f64) -> f64 {
    acoustic + lambda_sem * (sem_feat + sem_rec)
}
