use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::loss::reparameterize;
use crate::error::{Error, Result};
use crate::features::{EncoderWeights, FeatureSequence, Latent};
use crate::nn::{gelu, Linear, ParamStore, TransformerConfig, TransformerStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    /// Deterministic autoencoder.
    Ae,
    /// Learned diagonal Gaussian with a KL penalty.
    Vae,
    /// Fixed-variance Gaussian: only the mean is learned.
    SigmaVae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_s: usize,
    pub d_z: usize,
    pub mlp_hidden: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pos_kernel: usize,
    pub bottleneck: Bottleneck,
    pub kl_weight: f64,
    pub sigma: f64,
    /// 50 or 25.
    pub frame_rate: u32,
    /// Copy the first encoder layers into the compressor at initialization.
    pub init_from_encoder: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d_s: 256,
            d_z: 32,
            mlp_hidden: 576,
            n_layers: 3,
            heads: 4,
            ffn_mult: 2,
            pos_kernel: 5,
            bottleneck: Bottleneck::Ae,
            kl_weight: 1e-4,
            sigma: 0.1,
            frame_rate: 50,
            init_from_encoder: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_rate != 50 && self.frame_rate != 25 {
            return Err(Error::config(format!("latent frame rate {} not in {{50, 25}}", self.frame_rate)));
        }
        if self.d_z == 0 || self.d_s == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("adapter widths must be positive"));
        }
        if self.kl_weight < 0.0 || self.sigma < 0.0 {
            return Err(Error::config("KL weight and sigma must be non-negative"));
        }
        Ok(())
    }

    fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.d_s,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pos_kernel: self.pos_kernel,
            causal: false,
        }
    }

    /// Latent frames for `t` source frames.
    pub fn latent_frames(&self, t: usize) -> usize {
        if self.frame_rate == 25 {
            t.div_ceil(2)
        } else {
            t
        }
    }

    /// Dimension compression ratio `d_s / d_z`.
    pub fn compression_ratio(&self) -> f64 {
        self.d_s as f64 / self.d_z as f64
    }
}

/// How the bottleneck draws the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Mean path, deterministic.
    Eval,
    /// Reparameterized draw seeded by the given value (AE ignores it).
    Train(u64),
}

#[derive(Debug, Clone)]
pub struct CompressOutput {
    /// `[B, T', d_z]`.
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Option<Tensor>,
}

/// Compressor and restorer parameters (two parameter groups) and models.
pub struct AdapterWeights {
    pub config: AdapterConfig,
    pub compressor_store: ParamStore,
    pub restorer_store: ParamStore,
    c_layers: TransformerStack,
    c_up: Linear,
    c_down: Linear,
    r_up: Linear,
    r_down: Linear,
    r_layers: TransformerStack,
}

impl std::fmt::Debug for AdapterWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdapterWeights").field("config", &self.config).finish()
    }
}

impl AdapterWeights {
    pub fn new(config: AdapterConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_stores(
            config,
            ParamStore::new(crate::seed::derive(seed, "compressor"), dtype),
            ParamStore::new(crate::seed::derive(seed, "restorer"), dtype),
        )
    }

    pub fn from_stores(config: AdapterConfig, compressor_store: ParamStore, restorer_store: ParamStore) -> Result<Self> {
        config.validate()?;
        let tc = config.transformer();
        let c = compressor_store.root();
        let out_dim = if config.bottleneck == Bottleneck::Vae { 2 * config.d_z } else { config.d_z };
        let c_layers = TransformerStack::new(&c.pp("layers"), &tc, config.n_layers)?;
        let c_up = Linear::new(&c.pp("mlp.up"), config.d_s, config.mlp_hidden)?;
        let c_down = Linear::new(&c.pp("mlp.down"), config.mlp_hidden, out_dim)?;
        let r = restorer_store.root();
        let r_up = Linear::new(&r.pp("mlp.up"), config.d_z, config.mlp_hidden)?;
        let r_down = Linear::new(&r.pp("mlp.down"), config.mlp_hidden, config.d_s)?;
        let r_layers = TransformerStack::new(&r.pp("layers"), &tc, config.n_layers)?;
        Ok(Self {
            config,
            compressor_store,
            restorer_store,
            c_layers,
            c_up,
            c_down,
            r_up,
            r_down,
            r_layers,
        })
    }

    pub fn dtype(&self) -> DType {
        self.compressor_store.dtype()
    }

    pub fn compressor_vars(&self) -> Vec<(String, Var)> {
        self.compressor_store.vars()
    }

    pub fn restorer_vars(&self) -> Vec<(String, Var)> {
        self.restorer_store.vars()
    }

    /// `[B, T, d_s] -> [B, T', d_z]`.
    pub fn compress(&self, f: &Tensor, mode: LatentMode) -> Result<CompressOutput> {
        let (_, _, d) = f.dims3()?;
        if d != self.config.d_s {
            return Err(Error::config(format!(
                "compressor expects {}-dim features, got {d}",
                self.config.d_s
            )));
        }
        let mut h = self.c_layers.forward(f)?;
        if self.config.frame_rate == 25 {
            h = pool_pairs(&h)?;
        }
        let out = self.c_down.forward(&gelu(&self.c_up.forward(&h)?)?)?;
        let dz = self.config.d_z;
        Ok(match (self.config.bottleneck, mode) {
            (Bottleneck::Ae, _) => CompressOutput {
                z: out.clone(),
                mu: out,
                logvar: None,
            },
            (Bottleneck::Vae, m) => {
                let mu = out.narrow(2, 0, dz)?;
                let logvar = out.narrow(2, dz, dz)?;
                let z = match m {
                    LatentMode::Eval => mu.clone(),
                    LatentMode::Train(seed) => reparameterize(&mu, Some(&logvar), 0.0, seed)?.0,
                };
                CompressOutput {
                    z,
                    mu,
                    logvar: Some(logvar),
                }
            }
            (Bottleneck::SigmaVae, m) => {
                let z = match m {
                    LatentMode::Eval => out.clone(),
                    LatentMode::Train(seed) => reparameterize(&out, None, self.config.sigma, seed)?.0,
                };
                CompressOutput {
                    z,
                    mu: out,
                    logvar: None,
                }
            }
        })
    }

    /// `[B, T', d_z] -> [B, frames, d_s]`; in 25 Hz mode frames are duplicated
    /// and trimmed to `frames` before the transformer.
    pub fn restore(&self, z: &Tensor, frames: usize) -> Result<Tensor> {
        let (b, t, d) = z.dims3()?;
        if d != self.config.d_z {
            return Err(Error::config(format!("restorer expects {}-dim latents, got {d}", self.config.d_z)));
        }
        if self.config.latent_frames(frames) != t {
            return Err(Error::config(format!(
                "{t} latent frames cannot restore {frames} source frames at {} Hz",
                self.config.frame_rate
            )));
        }
        let mut h = self.r_down.forward(&gelu(&self.r_up.forward(z)?)?)?;
        if self.config.frame_rate == 25 {
            let c = h.dim(2)?;
            h = h
                .unsqueeze(2)?
                .broadcast_as((b, t, 2, c))?
                .reshape((b, 2 * t, c))?
                .narrow(1, 0, frames)?;
        }
        self.r_layers.forward(&h)
    }

    pub fn compress_frames(&self, f: &FeatureSequence, mode: LatentMode) -> Result<Latent> {
        let out = self.compress(&f.to_tensor(self.dtype())?, mode)?;
        Latent::from_tensor(&out.z.detach(), self.config.frame_rate)
    }

    pub fn restore_frames(&self, z: &Latent, frames: usize) -> Result<FeatureSequence> {
        if z.frame_rate() != self.config.frame_rate {
            return Err(Error::config(format!(
                "latent at {} Hz, adapter trained at {} Hz",
                z.frame_rate(),
                self.config.frame_rate
            )));
        }
        let out = self.restore(&z.to_tensor(self.dtype())?, frames)?;
        FeatureSequence::from_tensor(&out.detach(), 50)
    }
}

/// Stride-2 average pooling over time; an odd trailing frame is averaged with itself.
fn pool_pairs(h: &Tensor) -> Result<Tensor> {
    let (b, t, c) = h.dims3()?;
    let h = if t % 2 == 1 {
        Tensor::cat(&[h.clone(), h.narrow(1, t - 1, 1)?], 1)?
    } else {
        h.clone()
    };
    let t2 = h.dim(1)? / 2;
    Ok(h.reshape((b, t2, 2, c))?.mean(2)?)
}

/// Copies encoder transformer layers `0..n_layers` into the compressor.
pub fn init_compressor_from_encoder(adapter: &AdapterWeights, enc: &EncoderWeights) -> Result<usize> {
    let n = adapter.config.n_layers;
    if enc.config.n_layers < n {
        return Err(Error::config(format!(
            "encoder has {} layers, compressor needs {n}",
            enc.config.n_layers
        )));
    }
    if enc.config.d_s != adapter.config.d_s {
        return Err(Error::config(format!(
            "encoder width {} does not match adapter width {}",
            enc.config.d_s, adapter.config.d_s
        )));
    }
    let mut copied = 0;
    for i in 0..n {
        let prefix = format!("layers.{i}.");
        copied += adapter.compressor_store.copy_prefix(&enc.store, &prefix, &prefix)?;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_toy_encoder, EncoderConfig};
    use crate::nn::tensor_bytes;

    fn cfg(kind: Bottleneck, rate: u32) -> AdapterConfig {
        AdapterConfig {
            d_s: 16,
            d_z: 4,
            mlp_hidden: 24,
            heads: 2,
            pos_kernel: 3,
            bottleneck: kind,
            frame_rate: rate,
            ..Default::default()
        }
    }

    fn feats(t: usize) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::seed::rng(t as u64);
        let v: Vec<f32> = (0..t * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, (1, t, 16), &crate::nn::device()).unwrap()
    }

    #[test]
    fn frame_mappings() {
        let a = AdapterWeights::new(cfg(Bottleneck::Ae, 50), 0, DType::F32).unwrap();
        let z = a.compress(&feats(50), LatentMode::Eval).unwrap().z;
        assert_eq!(z.dims(), &[1, 50, 4]);
        assert_eq!(a.restore(&z, 50).unwrap().dims(), &[1, 50, 16]);
        let a = AdapterWeights::new(cfg(Bottleneck::Ae, 25), 0, DType::F32).unwrap();
        let z = a.compress(&feats(51), LatentMode::Eval).unwrap().z;
        assert_eq!(z.dims(), &[1, 26, 4]);
        assert_eq!(a.restore(&z, 51).unwrap().dims(), &[1, 51, 16]);
    }

    #[test]
    fn paper_scale_ratio() {
        let c = AdapterConfig {
            d_s: 1024,
            d_z: 128,
            ..Default::default()
        };
        assert_eq!(c.compression_ratio(), 8.0);
    }

    #[test]
    fn vae_eval_is_mean_and_train_is_stochastic() {
        let a = AdapterWeights::new(cfg(Bottleneck::Vae, 50), 0, DType::F32).unwrap();
        let f = feats(10);
        let e = a.compress(&f, LatentMode::Eval).unwrap();
        let mu = e.mu.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(e.z.flatten_all().unwrap().to_vec1::<f32>().unwrap(), mu);
        let t1 = a.compress(&f, LatentMode::Train(1)).unwrap().z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let t2 = a.compress(&f, LatentMode::Train(2)).unwrap().z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(t1, t2);
        assert_ne!(t1, mu);
    }

    #[test]
    fn ae_is_deterministic_and_rejects_width_mismatch() {
        let a = AdapterWeights::new(cfg(Bottleneck::Ae, 50), 0, DType::F32).unwrap();
        let f = feats(7);
        let z1 = a.compress(&f, LatentMode::Train(1)).unwrap().z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let z2 = a.compress(&f, LatentMode::Train(2)).unwrap().z.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(z1, z2);
        let bad = Tensor::zeros((1, 4, 8), DType::F32, &crate::nn::device()).unwrap();
        assert!(matches!(a.compress(&bad, LatentMode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn compressor_layers_copied_byte_exact() {
        let enc_cfg = EncoderConfig {
            d_s: 16,
            n_layers: 4,
            heads: 2,
            pos_kernel: 3,
            conv_channels: 8,
            ..Default::default()
        };
        let enc = build_toy_encoder(&enc_cfg, 3, DType::F32).unwrap();
        let a = AdapterWeights::new(cfg(Bottleneck::Ae, 50), 0, DType::F32).unwrap();
        let n = init_compressor_from_encoder(&a, &enc).unwrap();
        assert!(n > 0);
        for (name, var) in a.compressor_vars() {
            if name.starts_with("layers.") {
                let src = enc.store.get(&name).unwrap();
                assert_eq!(
                    tensor_bytes(var.as_tensor()).unwrap(),
                    tensor_bytes(src.as_tensor()).unwrap()
                );
            }
        }
        let wide = AdapterWeights::new(AdapterConfig { d_s: 32, ..cfg(Bottleneck::Ae, 50) }, 0, DType::F32).unwrap();
        assert!(matches!(init_compressor_from_encoder(&wide, &enc), Err(Error::Config(_))));
    }
}
