//! Tensor archive: a flat, named collection of little-endian `f32` tensors
//! with a string metadata table and an optional SHA-256 trailer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MBTNSR01"
//! flags        u32       bit 0: SHA-256 trailer present
//! meta_len     u32       length of the metadata JSON object (UTF-8)
//! meta         meta_len  {"key": "value", ...}
//! count        u32       number of tensors
//! per tensor, sorted by name:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   payload    prod(dims) x f32 (IEEE-754, little-endian)
//! trailer      32 bytes  SHA-256 of every preceding byte (when flagged)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MBTNSR01";
const FLAG_CHECKSUM: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor payload", expected, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn parse_err(message: impl Into<String>) -> Error {
    Error::Parse {
        what: "tensor archive".into(),
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| parse_err("truncated archive"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn to_bytes(&self, with_checksum: bool) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let flags = if with_checksum { FLAG_CHECKSUM } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
            for &d in &tensor.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if with_checksum {
            let digest = Sha256::digest(&out);
            out.extend_from_slice(&digest);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(parse_err("bad magic"));
        }
        let flags = cur.u32()?;
        let has_checksum = flags & FLAG_CHECKSUM != 0;
        if has_checksum {
            if bytes.len() < 8 + 4 + 32 {
                return Err(parse_err("truncated archive"));
            }
            let (body, trailer) = bytes.split_at(bytes.len() - 32);
            if Sha256::digest(body).as_slice() != trailer {
                return Err(Error::Checksum);
            }
            cur.bytes = body;
        }
        let meta_len = cur.u32()? as usize;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(cur.take(meta_len)?)?;
        let count = cur.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| parse_err(format!("tensor name: {e}")))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel.checked_mul(4).ok_or_else(|| parse_err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(parse_err(format!("duplicate tensor `{name}`")));
            }
        }
        if cur.pos != cur.bytes.len() {
            return Err(parse_err("trailing bytes after tensors"));
        }
        Ok(TensorArchive { metadata, tensors })
    }

    pub fn write_to(&self, mut writer: impl Write, with_checksum: bool) -> Result<()> {
        let bytes = self.to_bytes(with_checksum)?;
        writer
            .write_all(&bytes)
            .map_err(|e| Error::io("<writer>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>, with_checksum: bool) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(with_checksum)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::default();
        a.metadata.insert("kind".into(), "test".into());
        a.insert("w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        a.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        a
    }

    #[test]
    fn checksum_detects_corruption() {
        let mut bytes = sample().to_bytes(true).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(TensorArchive::from_bytes(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes(false).unwrap();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(TensorArchive::from_bytes(b"NOTMAGIC").is_err());
    }

    #[test]
    fn payload_size_is_validated() {
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(any::<u32>(), 0..64),
            checksum in any::<bool>(),
        ) {
            let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let mut a = TensorArchive::default();
            a.insert("t", Tensor::new(vec![data.len()], data.clone()).unwrap());
            let back = TensorArchive::from_bytes(&a.to_bytes(checksum).unwrap()).unwrap();
            let got: Vec<u32> = back.tensors["t"].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, values);
        }
    }
}
