//! Desk-scale evaluation: STOI, semantic retention, linear probes, cluster
//! separability, a 2-D PCA embedding, and reference classifiers standing in
//! for recognition error and speaker similarity.

mod classifiers;
mod metrics;
mod report;
mod stoi;

pub use classifiers::{ClassifierConfig, ReferenceClassifiers};
pub use metrics::{embed_2d, linear_probe, plot_data, segment_pool, semantic_retention, silhouette, Embedding2d, ProbeOutcome, PROBE_TEST_FRACTION};
pub use report::{eval_reconstruction, mel_distance, EvalReport, ReconstructionReference, UtteranceEval};
pub use stoi::{resample, stoi, stoi_samples};
