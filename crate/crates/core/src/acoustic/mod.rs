//! Latent-to-waveform decoding, the adversarial discriminator set, and the
//! acoustic loss terms.

mod decoder;
mod discriminator;
mod loss;

pub use decoder::{DecoderConfig, DecoderWeights};
pub use discriminator::{DiscOutput, DiscriminatorConfig, DiscriminatorSet};
pub use loss::{acoustic_loss, disc_loss, feature_matching_loss, gen_adv_loss, mel_loss, AcousticWeights};
