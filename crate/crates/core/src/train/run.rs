use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use super::state::TrainState;
use super::step::StepMetrics;
use crate::audio::{Corpus, Split};
use crate::data::CropSampler;
use crate::error::{Error, Result};

/// Where a training loop writes its outputs. Both are optional so tests can
/// run entirely in memory.
#[derive(Debug, Clone, Default)]
pub struct RunSink {
    /// Metric log, appended as line-delimited JSON.
    pub metrics: Option<PathBuf>,
    /// Directory receiving `step-N.wcck`.
    pub checkpoints: Option<PathBuf>,
}

impl RunSink {
    fn log(&self, m: &StepMetrics) -> Result<()> {
        if let Some(p) = &self.metrics {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let line = serde_json::to_string(m)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, state: &TrainState, name: &str) -> Result<Option<PathBuf>> {
        match &self.checkpoints {
            Some(dir) => {
                let path = dir.join(name);
                state.to_checkpoint()?.save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

/// Runs the stage from `state.step` up to `stop` (default: the configured
/// total). Batches come from the corpus train split in an order fixed by the
/// seed, so a resumed run replays exactly. Returns the logged records.
pub fn train_stage(state: &mut TrainState, corpus: &Corpus, sink: &RunSink, stop: Option<u64>) -> Result<Vec<StepMetrics>> {
    let cfg = state.stage.clone();
    let stop = stop.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let sampler = CropSampler::new(corpus, Split::Train, cfg.batch, cfg.crop_frames, state.batch_stream())?;
    let mut logged = Vec::new();
    while state.step < stop {
        let batch = sampler.batch_at(corpus, state.step, super::state::TRAIN_DTYPE)?;
        let m = match state.train_step(&batch) {
            Ok(m) => m,
            Err(e @ Error::Numeric(_)) => {
                let dumped = sink.checkpoint(state, &format!("failed-step-{}.wcck", state.step))?;
                if let Some(p) = dumped {
                    log::error!("state before the failing step saved to {}", p.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if m.step % cfg.log_every == 0 || state.step == cfg.total_steps {
            log::info!(
                "stage {} step {} lr {:.3e} total {:.4} mel {:.4}",
                m.stage,
                m.step,
                m.lr,
                m.total,
                m.mel
            );
            sink.log(&m)?;
            logged.push(m);
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
            sink.checkpoint(state, &format!("step-{}.wcck", state.step))?;
        }
    }
    Ok(logged)
}
