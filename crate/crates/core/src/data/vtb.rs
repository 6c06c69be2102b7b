//! VTB1: a little-endian container of named tensors plus JSON metadata.
//!
//! ```text
//! "VTB1" | u8 version = 1 | u32 meta_len | meta (UTF-8 JSON)
//! | u32 tensor_count
//! | per tensor: u8 name_len | name | u8 dtype | u8 rank | rank x u32 extent | payload
//! | u32 CRC32 of every preceding byte
//! ```
//!
//! dtype 0 = f64, 1 = f32, 2 = u8; payloads are row-major.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VTB1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum VtbData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl VtbData {
    fn dtype(&self) -> u8 {
        match self {
            VtbData::F64(_) => 0,
            VtbData::F32(_) => 1,
            VtbData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            VtbData::F64(v) => v.len(),
            VtbData::F32(v) => v.len(),
            VtbData::U8(v) => v.len(),
        }
    }
}

/// A named entry; `dims` may be empty for a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct VtbTensor {
    pub dims: Vec<usize>,
    pub data: VtbData,
}

impl VtbTensor {
    pub fn new(dims: Vec<usize>, data: VtbData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for extents {dims:?}",
                data.len()
            )));
        }
        Ok(VtbTensor { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        VtbTensor {
            dims: t.dims().to_vec(),
            data: VtbData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            VtbData::F64(v) => v.clone(),
            VtbData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VtbData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        if self.dims.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::new(self.dims.clone(), data)
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VtbData::U8(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VtbContainer {
    pub meta: Value,
    pub tensors: Vec<(String, VtbTensor)>,
}

impl VtbContainer {
    pub fn new(meta: Value) -> Self {
        VtbContainer {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: VtbTensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&VtbTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if name.is_empty() || name.len() > 255 || !name.is_ascii() {
                return Err(Error::InvalidSpec(format!("tensor name `{name}` must be 1-255 ASCII bytes")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate tensor name `{name}`")));
            }
            if t.dims.len() > 255 || t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::ShapeMismatch(format!("tensor `{name}` extents {:?}", t.dims)));
            }
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.dtype());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&len_u32(d, "extent")?.to_le_bytes());
            }
            match &t.data {
                VtbData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                VtbData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                VtbData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < 5 {
            return Err(corrupt("truncated header"));
        }
        if bytes[4] != VERSION {
            return Err(Error::VersionMismatch(bytes[4]));
        }
        if bytes.len() < 9 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 5 };
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u8()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .ok()
                .filter(|s| s.is_ascii() && !s.is_empty())
                .ok_or_else(|| corrupt("tensor name is not ASCII"))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("extent overflow"))?;
            let data = match dtype {
                0 => VtbData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => VtbData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                2 => VtbData::U8(r.take(n)?.to_vec()),
                other => return Err(corrupt(&format!("unknown dtype {other}"))),
            };
            if tensors.iter().any(|(existing, _)| existing == &name) {
                return Err(corrupt(&format!("duplicate tensor name `{name}`")));
            }
            tensors.push((name, VtbTensor { dims, data }));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before checksum"));
        }
        Ok(VtbContainer { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptFile(msg.to_string())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidSpec(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes `tensors` and `meta` to `path`.
pub fn write_vtb(path: impl AsRef<Path>, tensors: &[(String, VtbTensor)], meta: &Value) -> Result<()> {
    VtbContainer {
        meta: meta.clone(),
        tensors: tensors.to_vec(),
    }
    .write(path)
}

/// Reads named tensors and metadata from `path`.
pub fn read_vtb(path: impl AsRef<Path>) -> Result<(Vec<(String, VtbTensor)>, Value)> {
    let c = VtbContainer::read(path)?;
    Ok((c.tensors, c.meta))
}
