//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLLP"  u32 version  u32 entry_count
//! per entry:
//!   u32 name_len, name (UTF-8), u8 dtype, u32 rank, rank × u32 dims, payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::element::DType;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLLP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("missing entry {0}")]
    Missing(String),
    #[error("entry {name}: {detail}")]
    Invalid { name: String, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
            EntryData::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: EntryData,
}

/// Ordered list of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: EntryData::F32(t.data().to_vec()),
        });
    }

    pub fn push_f32_raw(&mut self, name: impl Into<String>, data: &[f32]) {
        self.entries.push(Entry {
            name: name.into(),
            dims: vec![data.len()],
            data: EntryData::F32(data.to_vec()),
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.entries.push(Entry {
            name: name.into(),
            dims: vec![values.len()],
            data: EntryData::U64(values.to_vec()),
        });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, values: &[f64]) {
        self.entries.push(Entry {
            name: name.into(),
            dims: vec![values.len()],
            data: EntryData::F64(values.to_vec()),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Tensor<f32>, CheckpointError> {
        let e = self.require(name)?;
        match &e.data {
            EntryData::F32(v) => {
                Tensor::new(e.dims.clone(), v.clone()).map_err(|err| CheckpointError::Invalid {
                    name: name.to_string(),
                    detail: err.to_string(),
                })
            }
            _ => Err(CheckpointError::Invalid {
                name: name.to_string(),
                detail: "expected f32".into(),
            }),
        }
    }

    pub fn f32_values(&self, name: &str) -> Result<Vec<f32>, CheckpointError> {
        match &self.require(name)?.data {
            EntryData::F32(v) => Ok(v.clone()),
            _ => Err(CheckpointError::Invalid {
                name: name.to_string(),
                detail: "expected f32".into(),
            }),
        }
    }

    pub fn u64_values(&self, name: &str) -> Result<Vec<u64>, CheckpointError> {
        match &self.require(name)?.data {
            EntryData::U64(v) => Ok(v.clone()),
            _ => Err(CheckpointError::Invalid {
                name: name.to_string(),
                detail: "expected u64".into(),
            }),
        }
    }

    pub fn f64_values(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        match &self.require(name)?.data {
            EntryData::F64(v) => Ok(v.clone()),
            _ => Err(CheckpointError::Invalid {
                name: name.to_string(),
                detail: "expected f64".into(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype() as u8);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDType(code))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let payload = r.take(
                n.checked_mul(dtype.size())
                    .ok_or(CheckpointError::Truncated)?,
            )?;
            let data = match dtype {
                DType::F32 => EntryData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => EntryData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U64 => EntryData::U64(
                    payload
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            debug_assert_eq!(data.len(), n);
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Invalid {
                name: "<file>".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
