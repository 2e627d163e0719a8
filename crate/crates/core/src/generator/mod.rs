//! Conditional flow-matching DiT over latent (or raw feature) sequences and
//! the diffusability probe comparing the two.

mod cfm;
mod corpus;
mod dit;
mod probe;
mod train;

pub use cfm::{cfm_loss, condition_drop, gaussian, infill_mask, sample, Cond, FlowBatch, SamplerConfig, VelocityField};
pub use corpus::{labels_at_rate, LatentCorpus, LatentItem, Normalizer, LABELS_FILE};
pub use dit::{time_features, DiT, DiTConfig};
pub use probe::{diffusability_probe, Arm, ArmRun, ArmScorer, DiffusabilityReport, ReferenceNumbers};
pub use train::{train_cfm, CfmConfig, CfmModel, CfmOutcome, CurvePoint};
