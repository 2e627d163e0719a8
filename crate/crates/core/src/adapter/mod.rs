//! Semantic adapter: the compressor that maps source features onto the
//! low-dimensional latent, the mirrored restorer, and the semantic
//! reconstruction loss that trains them.

mod loss;
mod model;

pub use loss::{kl_loss, reparameterize, semantic_loss, semantic_loss_frames};
pub use model::{
    init_compressor_from_encoder, AdapterConfig, AdapterWeights, Bottleneck, CompressOutput, LatentMode,
};
