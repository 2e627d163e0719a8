//! `WCUB` frame-matrix container.
//!
//! Layout (little-endian): magic `b"WCUB"`, u32 version, u32 frame rate,
//! u64 frame count T, u64 channel count D, then T*D f32 values row-major.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const WCUB_MAGIC: &[u8; 4] = b"WCUB";
pub const WCUB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

/// A `T x D` matrix of per-frame vectors at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f32>,
    frames: usize,
    dim: usize,
    frame_rate: u32,
}

/// Source features `f`, `f_ref`, `f_adapt`, restored features.
pub type FeatureSequence = FrameMatrix;
/// Bottleneck latents.
pub type Latent = FrameMatrix;

impl FrameMatrix {
    pub fn new(data: Vec<f32>, frames: usize, dim: usize, frame_rate: u32) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::data(format!(
                "{} values for a {frames}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            data,
            frames,
            dim,
            frame_rate,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], frame_rate: u32) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::data("ragged rows"));
        }
        Self::new(rows.concat(), rows.len(), dim, frame_rate)
    }

    /// From a `[T, D]` or `[1, T, D]` tensor.
    pub fn from_tensor(t: &Tensor, frame_rate: u32) -> Result<Self> {
        let t = match t.rank() {
            3 => t.squeeze(0)?,
            2 => t.clone(),
            r => return Err(Error::internal(format!("expected rank 2 or 3, got {r}"))),
        };
        let (frames, dim) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(data, frames, dim, frame_rate)
    }

    /// `[1, T, D]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.frames, self.dim), &crate::nn::device())?
            .to_dtype(dtype)?)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Mean over frames `[start, end)`.
    pub fn mean_pool(&self, start: usize, end: usize) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        let n = end.saturating_sub(start).max(1);
        for t in start..end.min(self.frames) {
            for (a, &v) in acc.iter_mut().zip(self.row(t)) {
                *a += f64::from(v);
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(WCUB_MAGIC);
        out.extend_from_slice(&WCUB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        out.extend_from_slice(&(self.frames as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::data("truncated WCUB header"));
        }
        if &bytes[0..4] != WCUB_MAGIC {
            return Err(Error::data("bad magic, not a WCUB container"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap_or([0; 4]));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap_or([0; 8]));
        let version = u32_at(4);
        if version != WCUB_VERSION {
            return Err(Error::data(format!("unsupported WCUB version {version}")));
        }
        let frame_rate = u32_at(8);
        let frames = usize::try_from(u64_at(12)).map_err(|_| Error::data("frame count overflow"))?;
        let dim = usize::try_from(u64_at(20)).map_err(|_| Error::data("dim overflow"))?;
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::data("WCUB size overflow"))?;
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "WCUB payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(data, frames, dim, frame_rate)
    }
}

pub fn save_features(path: impl AsRef<Path>, m: &FrameMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrameMatrix::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(frames in 0usize..20, dim in 1usize..9, rate in prop::sample::select(vec![25u32, 50]), seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let data: Vec<f32> = (0..frames * dim).map(|_| rng.random_range(-1e3f32..1e3)).collect();
            let m = FrameMatrix::new(data, frames, dim, rate).unwrap();
            let back = FrameMatrix::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), m.to_bytes());
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn header_layout_matches_text_dump() {
        // Independent decoding of the header fields by offset.
        let m = FrameMatrix::new(vec![1.5, -2.0, 0.25, 8.0, 3.0, -0.5], 3, 2, 50).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[0..4], b"WCUB");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 50);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 2);
        let dump: Vec<String> = b[28..]
            .chunks_exact(4)
            .map(|c| format!("{}", f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        assert_eq!(dump.join(" "), "1.5 -2 0.25 8 3 -0.5");
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let m = FrameMatrix::new(vec![0.0; 8], 4, 2, 50).unwrap();
        let b = m.to_bytes();
        assert!(matches!(FrameMatrix::from_bytes(&b[..b.len() - 3]), Err(Error::Data(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(FrameMatrix::from_bytes(&bad), Err(Error::Data(_))));
        let mut bad = b;
        bad[4] = 9;
        assert!(matches!(FrameMatrix::from_bytes(&bad), Err(Error::Data(_))));
    }
}
