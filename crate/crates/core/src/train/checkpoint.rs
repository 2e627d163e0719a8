//! `WCCK` checkpoint container: JSON metadata plus a named tensor table.
//!
//! Layout (little-endian): magic `WCCK`, u32 version, u32 metadata length,
//! metadata UTF-8 JSON, u32 tensor count, then per tensor u16 name length,
//! name, u8 dtype code, u8 rank, u64 dims, raw data.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{device, tensor_bytes};

pub const WCCK_MAGIC: &[u8; 4] = b"WCCK";
pub const WCCK_VERSION: u32 = 1;

fn dtype_code(dt: DType) -> Result<u8> {
    Ok(match dt {
        DType::F32 => 0,
        DType::F64 => 1,
        DType::U32 => 2,
        DType::I64 => 3,
        DType::U8 => 4,
        other => return Err(Error::internal(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn code_dtype(c: u8) -> Result<(DType, usize)> {
    Ok(match c {
        0 => (DType::F32, 4),
        1 => (DType::F64, 8),
        2 => (DType::U32, 4),
        3 => (DType::I64, 8),
        4 => (DType::U8, 1),
        other => return Err(Error::data(format!("unknown dtype code {other}"))),
    })
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn tensor_from_le(dtype: DType, dims: &[usize], raw: &[u8]) -> Result<Tensor> {
    let dev = device();
    let t = match dtype {
        DType::F32 => Tensor::from_vec(
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect::<Vec<_>>(),
            dims,
            &dev,
        )?,
        DType::F64 => Tensor::from_vec(
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect::<Vec<_>>(),
            dims,
            &dev,
        )?,
        DType::U32 => Tensor::from_vec(
            raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect::<Vec<_>>(),
            dims,
            &dev,
        )?,
        DType::I64 => Tensor::from_vec(
            raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8"))).collect::<Vec<_>>(),
            dims,
            &dev,
        )?,
        DType::U8 => Tensor::from_vec(raw.to_vec(), dims, &dev)?,
        other => return Err(Error::internal(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every tensor of `map` under `{prefix}.{name}`.
    pub fn insert_group(&mut self, prefix: &str, map: BTreeMap<String, Tensor>) {
        for (k, v) in map {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Tensors under `{prefix}.`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(WCCK_MAGIC);
        out.extend_from_slice(&WCCK_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::internal("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| Error::internal("tensor name too long"))?.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(dtype_code(t.dtype())?);
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&tensor_bytes(t)?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != WCCK_MAGIC {
            return Err(Error::data("not a WCCK checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != WCCK_VERSION {
            return Err(Error::data(format!("unsupported WCCK version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::data("tensor name is not UTF-8"))?
                .to_string();
            let (dtype, width) = code_dtype(r.u8()?)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::data("tensor size overflow"))?)?;
            tensors.insert(name, tensor_from_le(dtype, &dims, raw)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::data(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("wcck.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Deserializes the metadata field `key`.
    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint metadata lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::data(format!("checkpoint metadata `{key}`: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_of_a_single_tensor() {
        let mut c = Checkpoint::new(serde_json::json!({}));
        c.tensors.insert(
            "a".into(),
            Tensor::from_vec(vec![1.0f32, -2.0], 2, &device()).unwrap(),
        );
        let b = c.to_bytes().unwrap();
        let mut expect = b"WCCK".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"{}");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.push(b'a');
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_inputs_are_data_errors() {
        let mut c = Checkpoint::new(serde_json::json!({"step": 3}));
        c.tensors.insert("x".into(), Tensor::zeros((2, 3), DType::F64, &device()).unwrap());
        let b = c.to_bytes().unwrap();
        for bad in [&b[..b.len() - 1], &b[..10], b"WCCX"] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Data(_))));
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Data(_))));
        assert_eq!(Checkpoint::from_bytes(&b).unwrap().meta::<u64>("step").unwrap(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
            wide in proptest::collection::vec(proptest::num::f64::ANY, 1..10),
            name in "[a-z]{1,8}(\\.[a-z0-9]{1,6}){0,3}",
        ) {
            let mut c = Checkpoint::new(serde_json::json!({"name": name.clone()}));
            let n = vals.len();
            c.tensors.insert(name.clone(), Tensor::from_vec(vals, (1, n), &device()).unwrap());
            let m = wide.len();
            c.tensors.insert("w".into(), Tensor::from_vec(wide, m, &device()).unwrap());
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.metadata, c.metadata);
            for (k, t) in &c.tensors {
                prop_assert_eq!(tensor_bytes(&back.tensors[k]).unwrap(), tensor_bytes(t).unwrap());
                prop_assert_eq!(back.tensors[k].dims(), t.dims());
            }
        }
    }
}
