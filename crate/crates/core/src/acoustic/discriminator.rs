use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::StftConfig;
use crate::error::{Error, Result};
use crate::nn::dsp::TensorStft;
use crate::nn::{leaky_relu, Conv1d, ParamStore};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Multi-period branches.
    pub periods: Vec<usize>,
    pub period_channels: Vec<usize>,
    /// Multi-resolution branches: FFT sizes, hop is a quarter of each.
    pub resolutions: Vec<usize>,
    pub resolution_channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            period_channels: vec![16, 32, 64],
            resolutions: vec![512, 1024, 2048],
            resolution_channels: vec![32, 32, 32],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.resolutions.is_empty() {
            return Err(Error::config("discriminator set has no branches"));
        }
        if self.periods.contains(&0) || self.resolutions.iter().any(|&n| n < 8 || n % 4 != 0) {
            return Err(Error::config("periods must be positive and FFT sizes multiples of 4"));
        }
        if self.period_channels.is_empty() || self.resolution_channels.is_empty() {
            return Err(Error::config("discriminator branches need at least one hidden layer"));
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.periods.len() + self.resolutions.len()
    }
}

/// Per-branch logit maps and intermediate activations, in branch order.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub logits: Vec<Tensor>,
    pub taps: Vec<Vec<Tensor>>,
}

impl DiscOutput {
    /// Copies with gradient flow cut, for use as fixed targets.
    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.iter().map(Tensor::detach).collect(),
            taps: self.taps.iter().map(|t| t.iter().map(Tensor::detach).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<Conv1d>,
    out: Conv1d,
}

impl ConvStack {
    /// `[N, 1, L] -> (logits [N, L'], taps)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h)?, SLOPE)?;
            taps.push(h.clone());
        }
        let logits = self.out.forward(&h)?.squeeze(1)?;
        Ok((logits, taps))
    }
}

/// Multi-period and multi-resolution discriminators.
pub struct DiscriminatorSet {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    periods: Vec<ConvStack>,
    resolutions: Vec<(TensorStft, ConvStack)>,
}

impl std::fmt::Debug for DiscriminatorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscriminatorSet").field("config", &self.config).finish()
    }
}

impl DiscriminatorSet {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_store(config, ParamStore::new(seed, dtype))
    }

    pub fn from_store(config: DiscriminatorConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let mut periods = Vec::new();
        for &p in &config.periods {
            let s = root.pp(format!("mpd{p}"));
            let mut layers = Vec::new();
            let mut c_in = 1;
            for (i, &c) in config.period_channels.iter().enumerate() {
                layers.push(Conv1d::new(&s.pp(i), c_in, c, 5, 3, 2, 2)?);
                c_in = c;
            }
            let out = Conv1d::new(&s.pp("out"), c_in, 1, 3, 1, 1, 1)?;
            periods.push(ConvStack { layers, out });
        }
        let mut resolutions = Vec::new();
        for &n in &config.resolutions {
            let s = root.pp(format!("mrd{n}"));
            let mut layers = Vec::new();
            // Bins are the input channels; the stack scans over frames.
            let mut c_in = n / 2 + 1;
            for (i, &c) in config.resolution_channels.iter().enumerate() {
                layers.push(Conv1d::new(&s.pp(i), c_in, c, 3, 1, 1, 1)?);
                c_in = c;
            }
            let out = Conv1d::new(&s.pp("out"), c_in, 1, 3, 1, 1, 1)?;
            let stft = TensorStft::new(
                StftConfig {
                    nfft: n,
                    hop: n / 4,
                    win: n,
                },
                store.dtype(),
            )?;
            resolutions.push((stft, ConvStack { layers, out }));
        }
        Ok(Self {
            config,
            store,
            periods,
            resolutions,
        })
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    /// Runs every branch on `[B, L]` audio.
    pub fn forward(&self, y: &Tensor) -> Result<DiscOutput> {
        let (b, len) = y.dims2()?;
        let mut logits = Vec::with_capacity(self.config.branch_count());
        let mut taps = Vec::with_capacity(self.config.branch_count());
        for (stack, &p) in self.periods.iter().zip(&self.config.periods) {
            let padded_len = len.div_ceil(p) * p;
            let x = y.pad_with_zeros(1, 0, padded_len - len)?;
            // [B, L/p, p] -> [B, p, L/p]: one row per phase of the period.
            let x = x
                .reshape((b, padded_len / p, p))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * p, 1, padded_len / p))?;
            let (l, t) = stack.forward(&x)?;
            logits.push(l);
            taps.push(t);
        }
        for (stft, stack) in &self.resolutions {
            let x = stft.magnitude(y)?.transpose(1, 2)?.contiguous()?;
            let (l, t) = stack.forward(&x)?;
            logits.push(l);
            taps.push(t);
        }
        Ok(DiscOutput { logits, taps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            periods: vec![2, 3],
            period_channels: vec![4, 4],
            resolutions: vec![512],
            resolution_channels: vec![4],
        }
    }

    #[test]
    fn every_branch_reports_logits_and_taps() {
        let d = DiscriminatorSet::new(DiscriminatorConfig::default(), 0, DType::F32).unwrap();
        let y = Tensor::zeros((2, 8000), DType::F32, &crate::nn::device()).unwrap();
        let out = d.forward(&y).unwrap();
        assert_eq!(out.logits.len(), 8);
        assert_eq!(out.taps.len(), 8);
        for (l, t) in out.logits.iter().zip(&out.taps) {
            assert_eq!(l.rank(), 2);
            assert_eq!(t.len(), 3);
        }
    }

    #[test]
    fn period_reshape_groups_phases() {
        // A period-2 signal [a, b, a, b, ...] puts all a's in one row.
        let d = DiscriminatorSet::new(small(), 0, DType::F64).unwrap();
        let y: Vec<f64> = (0..1200).map(|i| if i % 2 == 0 { 0.3 } else { -0.7 }).collect();
        let y = Tensor::from_vec(y, (1, 1200), &crate::nn::device()).unwrap();
        let out = d.forward(&y).unwrap();
        let rows = out.taps[0][0].dims()[0];
        assert_eq!(rows, 2);
        // Constant rows give constant interior activations.
        let first = out.taps[0][0].get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert!((first[10] - first[100]).abs() < 1e-12);
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = small();
        c.resolutions = vec![510];
        assert!(matches!(DiscriminatorSet::new(c, 0, DType::F32), Err(Error::Config(_))));
    }
}
