//! Two-stage training: stage 1 fits the adapter to the frozen encoder and the
//! acoustic stack to frozen latents; stage 2 trains everything jointly under
//! semantic anchoring to the frozen reference.

mod checkpoint;
mod config;
mod run;
mod schedule;
mod state;
mod step;

pub use checkpoint::{Checkpoint, WCCK_MAGIC, WCCK_VERSION};
pub use config::{ModelConfig, StageConfig};
pub use run::{train_stage, RunSink};
pub use schedule::lr_schedule;
pub use state::{
    encoder_checkpoint, encoder_from_checkpoint, load_encoder, Pipeline, TrainState, GROUP_COMPRESSOR,
    GROUP_DECODER, GROUP_DISCRIMINATORS, GROUP_ENCODER, GROUP_RESTORER, REFERENCE, TRAIN_DTYPE,
};
pub use step::{stage1_step, stage2_step, stage2_total, GradientReport, StepMetrics};
