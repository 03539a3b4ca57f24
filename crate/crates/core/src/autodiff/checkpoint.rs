//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GRIDNRF1"
//! count    u64      number of records
//! record*  name_len u32, name (UTF-8), dtype u8, ndim u32, dims u64 * ndim,
//!          raw values (product(dims) * dtype width bytes)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::array::{Array, DType, Real};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GRIDNRF1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Utf8(String),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
            Payload::Utf8(_) => DType::Utf8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Utf8(s) => s.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn array<T: Real>(name: impl Into<String>, array: &Array<T>) -> Record {
        let values = array.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN));
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(values.map(|v| v as f32).collect()),
            _ => Payload::F64(values.collect()),
        };
        Record {
            name: name.into(),
            shape: array.shape().to_vec(),
            payload,
        }
    }

    pub fn u64(name: impl Into<String>, values: Vec<u64>) -> Record {
        Record {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::U64(values),
        }
    }

    pub fn text(name: impl Into<String>, text: impl Into<String>) -> Record {
        let text = text.into();
        Record {
            name: name.into(),
            shape: vec![text.len()],
            payload: Payload::Utf8(text),
        }
    }

    /// Converts a floating-point record to an array of `T`.
    pub fn to_array<T: Real>(&self) -> Result<Array<T>> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "record {} is not floating point",
                    self.name
                )))
            }
        };
        Array::new(&self.shape, data)
    }
}

/// Ordered list of named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.records.iter().any(|r| r.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype() as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Utf8(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = cur.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("record name: {e}")))?
                .to_string();
            let code = cur.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(dtype.width()).ok_or_else(|| {
                Error::Checkpoint(format!("record {name} too large"))
            })?)?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                DType::U64 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::Utf8 => Payload::Utf8(
                    String::from_utf8(raw.to_vec())
                        .map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?,
                ),
            };
            debug_assert_eq!(payload.len(), n);
            records.push(Record {
                name,
                shape,
                payload,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
