//! Source features: the toy SSL encoder, its frozen reference copy, masked
//! prediction pretraining, and the `WCUB` file container for externally
//! supplied features.

mod container;
mod encoder;
mod pretrain;

pub use container::{load_features, save_features, FeatureSequence, FrameMatrix, Latent, WCUB_MAGIC, WCUB_VERSION};
pub use encoder::{build_toy_encoder, EncoderConfig, EncoderWeights};
pub use pretrain::{pretrain_toy_encoder, span_mask, MelTargets, PretrainConfig, PretrainReport};
